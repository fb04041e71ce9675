"""Dense float64 tensors and a tape for reverse-mode differentiation.

Every forward value is computed eagerly when an op is recorded. ``backward``
expresses each vector-Jacobian product with the same recorded ops, so the
gradients it returns are themselves ``Var`` objects on the tape and can be
differentiated again (needed for gradient penalties).

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Scalars use
shape ``()``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class NotTwiceDifferentiable(RuntimeError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64, order="C")


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)


class Var:
    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.id}, op={self.tape.nodes[self.id].op}, shape={self.shape})"


class Tape:
    """Append-only record of operations. Not thread-safe; use one per thread."""

    def __init__(self):
        self.nodes: list[Node] = []

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def _push(self, op, inputs, value, **attrs) -> Var:
        self.nodes.append(Node(op, tuple(v.id for v in inputs), value, attrs))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str | None = None) -> Var:
        return self._push("leaf", (), as_tensor(value).copy(), name=name)

    def constant(self, value) -> Var:
        return self._push("const", (), as_tensor(value))

    def replay(self) -> list[np.ndarray]:
        """Recompute every node's forward value from the leaves."""
        out: list[np.ndarray] = []
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                out.append(node.value)
            else:
                args = [out[i] for i in node.inputs]
                out.append(_FORWARD[node.op](args, node.attrs))
        return out


def record(tape: Tape, op: str, inputs: Sequence[Var], **attrs) -> Var:
    """Append ``op`` applied to ``inputs`` and return its output Var."""
    if op not in _FORWARD:
        raise ValueError(f"unknown op {op!r}")
    for v in inputs:
        if v.tape is not tape:
            raise ValueError("input belongs to a different tape")
    args = [v.value for v in inputs]
    _check_shapes(op, args, attrs)
    value = _FORWARD[op](args, attrs)
    return tape._push(op, inputs, value, **attrs)


# --- convenience wrappers -------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    return record(a.tape, "matmul", (a, b))


def add(a: Var, b: Var) -> Var:
    return record(a.tape, "add", (a, b))


def sub(a: Var, b: Var) -> Var:
    return record(a.tape, "sub", (a, b))


def mul(a: Var, b: Var) -> Var:
    return record(a.tape, "mul", (a, b))


def scale(a: Var, s: float) -> Var:
    return record(a.tape, "scale", (a,), s=float(s))


def smul(a: Var, s: Var) -> Var:
    """Multiply a tensor by a scalar-shaped Var."""
    return record(a.tape, "smul", (a, s))


def relu(a: Var) -> Var:
    return record(a.tape, "relu", (a,))


def square(a: Var) -> Var:
    return record(a.tape, "square", (a,))


def sum(a: Var) -> Var:  # noqa: A001 - mirrors the op name
    return record(a.tape, "sum", (a,))


def l2norm(a: Var) -> Var:
    return record(a.tape, "l2norm", (a,))


def transpose(a: Var) -> Var:
    return record(a.tape, "transpose", (a,))


def reshape(a: Var, shape: Sequence[int]) -> Var:
    return record(a.tape, "reshape", (a,), shape=tuple(int(s) for s in shape))


def spmm(matrix: sp.spmatrix, x: Var) -> Var:
    """Left-multiply ``x`` by a constant sparse matrix."""
    return record(x.tape, "spmm", (x,), matrix=sp.csr_matrix(matrix))


def relgather(stack: sp.spmatrix, x: Var, n_rel: int) -> Var:
    """Sum over relations of ``A_r @ x[:, block r]``.

    ``stack`` is ``hstack([A_0, ..., A_{R-1}])`` (shape n_out x R*n_in) and
    ``x`` has shape ``(n_in, R*d)``.
    """
    return record(x.tape, "relgather", (x,), stack=sp.csr_matrix(stack), n_rel=int(n_rel))


def softmax_xent(logits: Var, rows: Sequence[int], labels: Sequence[int]) -> Var:
    """Mean cross-entropy of row-softmax over the selected rows."""
    rows = np.asarray(rows, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    return record(logits.tape, "softmax_xent", (logits,), rows=rows, labels=labels)


def surrogate(inputs: Sequence[Var], value: float, grads: Sequence[np.ndarray]) -> Var:
    """Scalar with a fixed value and fixed first derivatives w.r.t. ``inputs``.

    Lets externally computed objectives (e.g. transport costs with an
    envelope gradient) join a taped loss.
    """
    tape = inputs[0].tape
    grads = [as_tensor(g) for g in grads]
    return record(tape, "surrogate", tuple(inputs), fixed=float(value), grads=grads)


# --- forward rules ---------------------------------------------------------


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _xent_forward(args, at):
    z = args[0][at["rows"]]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(len(at["rows"])), at["labels"]]
    return np.asarray(np.mean(lse - picked))


def _xent_dlogits(z: np.ndarray, at) -> np.ndarray:
    rows, labels = at["rows"], at["labels"]
    d = np.zeros_like(z)
    p = _softmax_rows(z[rows])
    p[np.arange(len(rows)), labels] -= 1.0
    np.add.at(d, rows, p / len(rows))
    return d


def _xent_hvp(z: np.ndarray, u: np.ndarray, at) -> np.ndarray:
    rows = at["rows"]
    p = _softmax_rows(z[rows])
    ur = u[rows]
    hv = p * ur - p * (p * ur).sum(axis=1, keepdims=True)
    out = np.zeros_like(z)
    np.add.at(out, rows, hv / len(rows))
    return out


def _relgather_forward(args, at):
    x = args[0]
    n_rel = at["n_rel"]
    n, rd = x.shape
    d = rd // n_rel
    stacked = x.reshape(n, n_rel, d).transpose(1, 0, 2).reshape(n_rel * n, d)
    return np.asarray(at["stack"] @ stacked)


def _relscatter_forward(args, at):
    # at["stack_t"] is the transpose of the relgather stack: (R*n_in x n_out)
    g = args[0]
    n_rel = at["n_rel"]
    y = np.asarray(at["stack_t"] @ g)
    n = y.shape[0] // n_rel
    d = y.shape[1]
    return np.ascontiguousarray(y.reshape(n_rel, n, d).transpose(1, 0, 2).reshape(n, n_rel * d))


def _safe_recip_norm(n: np.ndarray) -> float:
    return 0.0 if float(n) == 0.0 else 1.0 / float(n)


_FORWARD: dict[str, Callable] = {
    "matmul": lambda a, at: a[0] @ a[1],
    "add": lambda a, at: a[0] + a[1],
    "sub": lambda a, at: a[0] - a[1],
    "mul": lambda a, at: a[0] * a[1],
    "scale": lambda a, at: a[0] * at["s"],
    "smul": lambda a, at: a[0] * a[1],
    "relu": lambda a, at: np.maximum(a[0], 0.0),
    "relu_mask": lambda a, at: a[0] * at["mask"],
    "square": lambda a, at: a[0] * a[0],
    "sum": lambda a, at: np.asarray(a[0].sum()),
    "expand": lambda a, at: np.full(at["shape"], float(a[0])),
    "l2norm": lambda a, at: np.asarray(np.sqrt((a[0] * a[0]).sum())),
    "transpose": lambda a, at: np.ascontiguousarray(a[0].T),
    "reshape": lambda a, at: a[0].reshape(at["shape"]),
    "spmm": lambda a, at: np.asarray(at["matrix"] @ a[0]),
    "relgather": _relgather_forward,
    "relscatter": _relscatter_forward,
    "softmax_xent": _xent_forward,
    "xent_grad": lambda a, at: _xent_dlogits(a[0], at) * float(a[1]),
    "xent_hvp": lambda a, at: _xent_hvp(a[0], a[1], at) * float(a[2]),
    "xent_gdot": lambda a, at: np.asarray((a[1] * _xent_dlogits(a[0], at)).sum()),
    "surrogate": lambda a, at: np.asarray(at["fixed"]),
    "inv_norm_scale": lambda a, at: a[0] * _safe_recip_norm(a[1]),
}


def _check_shapes(op, args, attrs):
    shapes = [a.shape for a in args]
    if op == "matmul":
        a, b = shapes
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            raise ShapeError(f"matmul: incompatible shapes {a} and {b}")
    elif op in ("add", "sub", "mul"):
        if shapes[0] != shapes[1]:
            raise ShapeError(f"{op}: incompatible shapes {shapes[0]} and {shapes[1]}")
    elif op == "smul":
        if args[1].size != 1:
            raise ShapeError(f"smul: second operand must be scalar, got {shapes[1]}")
    elif op == "reshape":
        if int(np.prod(attrs["shape"])) != args[0].size:
            raise ShapeError(f"reshape: cannot reshape {shapes[0]} to {attrs['shape']}")
    elif op == "spmm":
        if attrs["matrix"].shape[1] != shapes[0][0]:
            raise ShapeError(f"spmm: incompatible shapes {attrs['matrix'].shape} and {shapes[0]}")
    elif op == "relgather":
        n_rel = attrs["n_rel"]
        x = shapes[0]
        if len(x) != 2 or x[1] % n_rel or attrs["stack"].shape[1] != n_rel * x[0]:
            raise ShapeError(f"relgather: incompatible shapes {attrs['stack'].shape} and {x}")
    elif op == "softmax_xent":
        if len(shapes[0]) != 2:
            raise ShapeError(f"softmax_xent: logits must be 2-D, got {shapes[0]}")
        if len(attrs["rows"]) == 0:
            raise ShapeError("softmax_xent: no rows selected")
    elif op == "surrogate":
        for a, g in zip(args, attrs["grads"]):
            if a.shape != g.shape:
                raise ShapeError(f"surrogate: gradient shape {g.shape} vs input {a.shape}")


# --- vector-Jacobian products, written with taped ops ---------------------


def _vjp(tape: Tape, node: Node, out_id: int, g: Var) -> list[Var | None]:
    op = node.op
    ins = [Var(tape, i) for i in node.inputs]
    at = node.attrs
    if op == "matmul":
        a, b = ins
        return [matmul(g, transpose(b)), matmul(transpose(a), g)]
    if op == "add":
        return [g, g]
    if op == "sub":
        return [g, scale(g, -1.0)]
    if op == "mul":
        a, b = ins
        return [mul(g, b), mul(g, a)]
    if op == "scale":
        return [scale(g, at["s"])]
    if op == "smul":
        a, s = ins
        gs = sum(mul(g, a))
        if s.shape != ():
            gs = reshape(gs, s.shape)
        return [smul(g, s), gs]
    if op == "relu":
        mask = (ins[0].value > 0.0).astype(np.float64)
        return [record(tape, "relu_mask", (g,), mask=mask)]
    if op == "relu_mask":
        return [record(tape, "relu_mask", (g,), mask=at["mask"])]
    if op == "square":
        return [mul(g, scale(ins[0], 2.0))]
    if op == "sum":
        return [record(tape, "expand", (g,), shape=ins[0].shape)]
    if op == "expand":
        return [reshape(sum(g), ins[0].shape) if ins[0].shape != () else sum(g)]
    if op == "l2norm":
        # d||x|| = x / ||x||; zero subgradient at the origin
        out = Var(tape, out_id)
        return [smul(record(tape, "inv_norm_scale", (ins[0], out)), g)]
    if op == "inv_norm_scale":
        # y = x / n with n = ||x|| held as a separate input
        x, n = ins
        inv = _safe_recip_norm(n.value)
        gx = scale(g, inv)
        gn = scale(sum(mul(g, x)), -inv * inv)
        return [gx, gn]
    if op == "transpose":
        return [transpose(g)]
    if op == "reshape":
        return [reshape(g, ins[0].shape)]
    if op == "spmm":
        return [record(tape, "spmm", (g,), matrix=sp.csr_matrix(at["matrix"].T))]
    if op == "relgather":
        return [record(tape, "relscatter", (g,), stack_t=sp.csr_matrix(at["stack"].T),
                       stack=at["stack"], n_rel=at["n_rel"])]
    if op == "relscatter":
        return [record(tape, "relgather", (g,), stack=at["stack"], n_rel=at["n_rel"])]
    if op == "softmax_xent":
        return [record(tape, "xent_grad", (ins[0], g), rows=at["rows"], labels=at["labels"])]
    if op == "xent_grad":
        z, s = ins
        gz = record(tape, "xent_hvp", (z, g, s), rows=at["rows"], labels=at["labels"])
        gs = record(tape, "xent_gdot", (z, g), rows=at["rows"], labels=at["labels"])
        return [gz, gs]
    if op == "surrogate":
        return [smul(tape.constant(gr), g) for gr in at["grads"]]
    if op in ("xent_hvp", "xent_gdot"):
        raise NotTwiceDifferentiable(f"op {op!r} is not twice differentiable")
    raise NotTwiceDifferentiable(f"no derivative rule for op {op!r}")


def backward(tape: Tape, loss: Var, wrt: Sequence[Var]) -> list[Var]:
    """Gradients of a scalar ``loss`` w.r.t. each of ``wrt``, as taped Vars.

    Contributions are accumulated in reverse tape order, so identical tapes
    give bit-identical gradients. Inputs that do not influence ``loss`` get
    a zero constant.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, Var] = {loss.id: tape.constant(np.ones(loss.shape))}
    wanted = {v.id for v in wrt}
    lowest = min(wanted) if wanted else 0
    for nid in range(loss.id, lowest - 1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.op in ("leaf", "const"):
            continue
        for in_id, gi in zip(node.inputs, _vjp(tape, node, nid, g)):
            if gi is None or tape.nodes[in_id].op == "const":
                continue
            prev = grads.get(in_id)
            grads[in_id] = gi if prev is None else add(prev, gi)
    out = []
    for v in wrt:
        g = grads.get(v.id)
        out.append(g if g is not None else tape.constant(np.zeros(v.shape)))
    return out


def grad_values(tape: Tape, loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    return [g.value for g in backward(tape, loss, wrt)]


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = as_tensor(x).copy()
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g
