import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedalign import numkernel as nk

from conftest import rel_err


def test_matmul_shape():
    t = nk.Tape()
    out = nk.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((3, 4))))
    assert out.shape == (2, 4)
    assert len(t.nodes) == 3


def test_add_zeros():
    t = nk.Tape()
    out = nk.add(t.leaf(np.zeros((2, 2))), t.leaf(np.zeros((2, 2))))
    np.testing.assert_array_equal(out.value, np.zeros((2, 2)))


def test_relu_values():
    t = nk.Tape()
    np.testing.assert_array_equal(nk.relu(t.leaf([-1.0, 0.0, 2.0])).value, [0.0, 0.0, 2.0])


def test_shape_mismatch_names_op_and_shapes():
    t = nk.Tape()
    with pytest.raises(nk.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        nk.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3))))
    with pytest.raises(nk.ShapeError, match="add"):
        nk.add(t.leaf(np.ones(2)), t.leaf(np.ones(3)))


def test_backward_of_sum():
    t = nk.Tape()
    x = t.leaf([1.0, -2.0, 5.0])
    (g,) = nk.grad_values(t, nk.sum(x), [x])
    np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])


def test_backward_of_squared_norm():
    t = nk.Tape()
    x = t.leaf([3.0, 4.0])
    (g,) = nk.grad_values(t, nk.sum(nk.square(x)), [x])
    np.testing.assert_allclose(g, [6.0, 8.0])


def test_non_scalar_loss_rejected():
    t = nk.Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        nk.backward(t, x, [x])


def _two_layer(rng):
    X = rng.standard_normal((5, 4))
    W1 = rng.standard_normal((4, 6))
    W2 = rng.standard_normal((6, 3))

    def build(t, w1, w2):
        h = nk.relu(nk.matmul(t.constant(X), w1))
        return nk.sum(nk.square(nk.matmul(h, w2)))

    return W1, W2, build


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(3)
    W1, W2, build = _two_layer(rng)
    t = nk.Tape()
    w1, w2 = t.leaf(W1), t.leaf(W2)
    g1, g2 = nk.grad_values(t, build(t, w1, w2), [w1, w2])

    def f1(x):
        t2 = nk.Tape()
        return float(build(t2, t2.leaf(x), t2.leaf(W2)).value)

    def f2(x):
        t2 = nk.Tape()
        return float(build(t2, t2.leaf(W1), t2.leaf(x)).value)

    assert rel_err(g1, nk.finite_diff_grad(f1, W1, 1e-5)) < 1e-5
    assert rel_err(g2, nk.finite_diff_grad(f2, W2, 1e-5)) < 1e-5


def test_finite_diff_quadratic():
    g = nk.finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-4)
    assert abs(g[0] - 6.0) < 1e-6


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-100, 100)))
def test_finite_diff_sum_is_ones(x):
    np.testing.assert_allclose(nk.finite_diff_grad(lambda v: float(v.sum()), x, 1e-3), 1.0, atol=1e-8)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        nk.finite_diff_grad(lambda v: float(v.sum()), np.ones(2), 0.0)


def test_relu_derivative_at_zero_is_zero():
    t = nk.Tape()
    x = t.leaf([0.0, 1.0, -1.0])
    (g,) = nk.grad_values(t, nk.sum(nk.relu(x)), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


# every op composed into a scalar, compared with central differences
def _compose(t, a, b, s):
    m = nk.matmul(a, nk.transpose(b))
    e = nk.sub(nk.mul(m, m), nk.scale(m, 0.5))
    r = nk.reshape(nk.relu(e), (12,))
    n = nk.l2norm(nk.add(r, nk.smul(r, s)))
    return nk.add(n, nk.sum(nk.square(a)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_op_compositions_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0.5, 1.5, (3, 2)) * rng.choice([-1, 1], (3, 2))
    B = rng.uniform(0.5, 1.5, (4, 2)) * rng.choice([-1, 1], (4, 2))
    S = np.array(rng.uniform(0.5, 2.0))
    # skip draws that put a relu input near its kink
    m = A @ B.T
    if np.abs(m * m - 0.5 * m).min() < 1e-2:
        return
    t = nk.Tape()
    a, b, s = t.leaf(A), t.leaf(B), t.leaf(S)
    grads = nk.grad_values(t, _compose(t, a, b, s), [a, b, s])

    def f(which):
        def inner(x):
            t2 = nk.Tape()
            args = [A, B, S]
            args[which] = x
            return float(_compose(t2, *(t2.leaf(v) for v in args)).value)
        return inner

    for k, (x, g) in enumerate(zip([A, B, S], grads)):
        assert rel_err(g, nk.finite_diff_grad(f(k), x, 1e-6)) < 1e-4


def test_softmax_xent_gradient():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((5, 3))
    rows, labels = [0, 2, 4], [1, 0, 2]
    t = nk.Tape()
    z = t.leaf(Z)
    (g,) = nk.grad_values(t, nk.softmax_xent(z, rows, labels), [z])

    def f(x):
        t2 = nk.Tape()
        return float(nk.softmax_xent(t2.leaf(x), rows, labels).value)

    assert rel_err(g, nk.finite_diff_grad(f, Z, 1e-6)) < 1e-6
    assert np.all(g[[1, 3]] == 0.0)


def test_second_order_gradient_norm():
    """d/dw ||grad_x f(w, x)|| through backward() matches differences of the norm."""
    rng = np.random.default_rng(1)
    X = rng.standard_normal((4, 3))
    W = rng.standard_normal((3, 2))
    rows, labels = [0, 1, 3], [1, 0, 1]

    def norm_of_grad(t, x, w):
        loss = nk.softmax_xent(nk.relu(nk.matmul(x, w)), rows, labels)
        (gx,) = nk.backward(t, loss, [x])
        return nk.l2norm(gx)

    t = nk.Tape()
    x, w = t.leaf(X), t.leaf(W)
    (gw,) = nk.grad_values(t, norm_of_grad(t, x, w), [w])

    def f(v):
        t2 = nk.Tape()
        return float(norm_of_grad(t2, t2.leaf(X), t2.leaf(v)).value)

    assert rel_err(gw, nk.finite_diff_grad(f, W, 1e-6)) < 1e-3


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((3, 3))
    t = nk.Tape()
    x = t.leaf(X)
    f = nk.sum(nk.square(x))
    g = nk.sum(nk.matmul(x, x))
    combo = nk.add(nk.scale(f, a), nk.scale(g, b))
    (gc,) = nk.grad_values(t, combo, [x])
    (gf,) = nk.grad_values(t, f, [x])
    (gg,) = nk.grad_values(t, g, [x])
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=0, atol=1e-12 * (1 + np.abs(gc).max()))


def test_replay_is_bit_exact_and_deterministic():
    rng = np.random.default_rng(2)
    W1, W2, build = _two_layer(rng)

    def run():
        t = nk.Tape()
        w1, w2 = t.leaf(W1), t.leaf(W2)
        loss = build(t, w1, w2)
        return t, [loss.value, *nk.grad_values(t, loss, [w1, w2])]

    t, first = run()
    _, second = run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)
    for node, v in zip(t.nodes, t.replay()):
        assert np.array_equal(node.value, v)


def test_inputs_precede_outputs_on_tape():
    rng = np.random.default_rng(4)
    W1, W2, build = _two_layer(rng)
    t = nk.Tape()
    w1, w2 = t.leaf(W1), t.leaf(W2)
    nk.backward(t, build(t, w1, w2), [w1])
    for k, node in enumerate(t.nodes):
        assert all(i < k for i in node.inputs)


def test_third_order_through_xent_raises():
    t = nk.Tape()
    z = t.leaf(np.array([[0.3, -0.2]]))
    loss = nk.softmax_xent(z, [0], [1])
    (g,) = nk.backward(t, loss, [z])
    (h,) = nk.backward(t, nk.sum(nk.square(g)), [z])
    with pytest.raises(nk.NotTwiceDifferentiable):
        nk.backward(t, nk.sum(h), [z])
