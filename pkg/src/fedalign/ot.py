"""Optimal transport between sets of basis matrices.

Each basis set is treated as a uniform discrete measure over its members,
with squared Euclidean distance between flattened matrices as ground cost.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import logsumexp

log = logging.getLogger(__name__)

LOG_DOMAIN_THRESHOLD = 500.0


@dataclass(frozen=True)
class CostMatrix:
    M: np.ndarray
    provenance: str = "squared euclidean"

    def __post_init__(self):
        if not np.all(np.isfinite(self.M)) or (self.M < 0).any():
            raise ValueError("cost entries must be finite and nonnegative")


@dataclass(frozen=True)
class TransportPlan:
    P: np.ndarray
    r: np.ndarray
    c: np.ndarray
    converged: bool = True
    iterations: int = 0
    entropy: float = 0.0
    v: np.ndarray | None = None  # column scaling, reusable as a warm start

    def marginal_violation(self) -> float:
        return float(max(np.abs(self.P.sum(1) - self.r).max(), np.abs(self.P.sum(0) - self.c).max()))


def _flat(V) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    return V.reshape(V.shape[0], -1)


def basis_cost_matrix(Vk, Vj) -> CostMatrix:
    """M[a, b] = ||Vk[a] - Vj[b]||^2 over flattened basis matrices."""
    A, B = _flat(Vk), _flat(Vj)
    if np.shape(Vk)[1:] != np.shape(Vj)[1:]:
        raise ValueError(f"basis shape mismatch: {np.shape(Vk)[1:]} vs {np.shape(Vj)[1:]}")
    with np.errstate(over="ignore", invalid="ignore"):
        M = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    if not np.all(np.isfinite(M)) and np.all(np.isfinite(A)) and np.all(np.isfinite(B)):
        raise OverflowError("basis cost matrix overflowed")
    return CostMatrix(np.maximum(M, 0.0))


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def _check_marginals(r, c):
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if (r < 0).any() or (c < 0).any():
        raise ValueError("marginals must be nonnegative")
    if abs(r.sum() - c.sum()) > 1e-9:
        raise ValueError(f"marginal mismatch: sum(r)={r.sum()} sum(c)={c.sum()}")
    return r, c


def exact_emd(r, c, M) -> tuple[float, TransportPlan]:
    """Exact min <P, M> over couplings of r and c.

    Uniform square problems reduce to an assignment; anything else goes
    through the transportation LP.
    """
    r, c = _check_marginals(r, c)
    M = np.asarray(M, dtype=np.float64)
    n, m = M.shape
    if n == m and np.allclose(r, 1.0 / n, rtol=0, atol=1e-15) and np.allclose(c, 1.0 / n, rtol=0, atol=1e-15):
        rows, cols = linear_sum_assignment(M)
        P = np.zeros_like(M)
        P[rows, cols] = 1.0 / n
        return float(M[rows, cols].sum() / n), TransportPlan(P, r, c)
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(M.ravel(), A_eq=A_eq, b_eq=np.concatenate([r, c]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    P = res.x.reshape(n, m)
    return float((P * M).sum()), TransportPlan(P, r, c)


def emd_by_permutations(M) -> float:
    """Brute-force uniform EMD: min over permutations of the mean matched cost."""
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    idx = np.arange(n)
    return min(float(M[idx, list(p)].sum()) / n for p in itertools.permutations(range(n)))


def _entropy(P: np.ndarray) -> float:
    p = P[P > 0]
    return float(-(p * np.log(p)).sum())


def sinkhorn(r, c, M, lam: float = 10.0, max_iters: int = 1000, tol: float = 1e-9,
             v0: np.ndarray | None = None) -> tuple[float, TransportPlan]:
    """Entropic OT by alternating row/column scaling.

    Returns the transport cost <P, M> of the regularized plan (the entropy
    is on the plan). Scaling sweeps slow to a crawl once the plan is close to
    sparse; when a check window gains less than 10%, the solve switches to
    Newton steps on the dual, which share the fixed point. ``converged`` is
    False if the marginal violation is still above ``tol`` when the budget
    runs out; the iterate is then rounded onto the marginals so the returned
    plan is always feasible. ``v0`` warm-starts the column scaling.
    """
    if lam <= 0:
        raise ValueError("sinkhorn regularization lambda must be positive")
    r, c = _check_marginals(r, c)
    M = np.asarray(M, dtype=np.float64)
    if v0 is not None and (v0.shape != c.shape or not np.all(np.isfinite(v0)) or (v0 <= 0).any()):
        v0 = None
    logK = -lam * M
    if lam * M.max(initial=0.0) > LOG_DOMAIN_THRESHOLD:
        f, g, it, ok = _sinkhorn_log(r, c, logK, max_iters, tol, v0)
    else:
        f, g, it, ok = _sinkhorn_kernel(r, c, logK, max_iters, tol, v0)
    if not ok and it < max_iters and (r > 0).all() and (c > 0).all():
        f, g, steps, ok = _newton(r, c, logK, f, g, tol, min(_NEWTON_STEPS, max_iters - it))
        it += steps
    with np.errstate(over="ignore"):
        P = np.exp(logK + f[:, None] + g[None, :])
    if not ok:
        log.debug("sinkhorn stopped after %d iterations without reaching tol=%g", it, tol)
        P = round_to_marginals(P, r, c)
    plan = TransportPlan(P, r, c, converged=ok, iterations=it, entropy=_entropy(P), v=_warm_v(g))
    return float((P * M).sum()), plan


_CHECK_EVERY = 10
_SLOW_RATIO = 0.9  # hand over to Newton when a check window improves the violation by < 10%
_NEWTON_STEPS = 50


def _violation(P, r, c) -> float:
    return float(max(np.abs(P.sum(1) - r).max(), np.abs(P.sum(0) - c).max()))


def _sinkhorn_kernel(r, c, logK, max_iters, tol, v0):
    K = np.exp(logK)
    KT = np.ascontiguousarray(K.T)
    v = np.ones_like(c) if v0 is None else v0.copy()
    it = 0
    prev = np.inf
    ok = False
    while it < max_iters:
        u = r / (K @ v)
        v = c / (KT @ u)
        it += 1
        # columns are exact after the v update; only rows can be off
        if it % _CHECK_EVERY == 0 or it == max_iters:
            err = np.abs(u * (K @ v) - r).max()
            if err < tol:
                ok = True
                break
            if err > _SLOW_RATIO * prev:
                break
            prev = err
    with np.errstate(divide="ignore"):
        return np.log(u), np.log(v), it, ok


def _warm_v(g: np.ndarray) -> np.ndarray:
    # only a starting point for the next solve, so clipping is harmless
    return np.exp(np.clip(g, -700.0, 700.0))


def _sinkhorn_log(r, c, logK, max_iters, tol, v0):
    with np.errstate(divide="ignore"):
        log_r, log_c = np.log(r), np.log(c)
    g = np.zeros_like(c) if v0 is None else np.log(v0)
    it = 0
    prev = np.inf
    ok = False
    while it < max_iters:
        f = log_r - logsumexp(logK + g[None, :], axis=1)
        g = log_c - logsumexp(logK + f[:, None], axis=0)
        it += 1
        if it % _CHECK_EVERY == 0 or it == max_iters:
            err = np.abs(np.exp(logsumexp(logK + f[:, None] + g[None, :], axis=1)) - r).max()
            if err < tol:
                ok = True
                break
            if err > _SLOW_RATIO * prev:
                break
            prev = err
    return f, g, it, ok


def _solve_dual_system(P: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve [[diag(P 1), P], [P^T, diag(P^T 1)]] z = rhs.

    The system is singular along (f + t, g - t) and close to singular when P
    is nearly block diagonal. Directions that weak only touch tiny entries
    of P, so a ridge at 1e-12 of the diagonal scale damps them out. The row
    block is eliminated first and the column Schur complement is factored.
    """
    n = P.shape[0]
    dr, dc = P.sum(1), P.sum(0)
    ridge = 1e-12 * max(dr.max(), dc.max())
    dr_safe = np.maximum(dr, ridge)
    Q = P / dr_safe[:, None]
    S = np.diag(dc) - P.T @ Q
    b = rhs[n:] - Q.T @ rhs[:n]
    try:
        y = cho_solve(cho_factor(S + ridge * np.eye(len(S))), b)
    except LinAlgError:
        y = np.linalg.lstsq(S, b, rcond=1e-12)[0]
    x = (rhs[:n] - P @ y) / dr_safe
    return np.concatenate([x, y])


def _newton(r, c, logK, f, g, tol, max_steps):
    """Maximize the concave dual <f, r> + <g, c> - sum(P) with damped Newton steps."""
    n = len(r)

    def plan(f, g):
        with np.errstate(over="ignore"):
            return np.exp(logK + f[:, None] + g[None, :])

    P = plan(f, g)
    D = f @ r + g @ c - P.sum()
    for step in range(1, max_steps + 1):
        grad = np.concatenate([r - P.sum(1), c - P.sum(0)])
        d = _solve_dual_system(P, grad)
        slope = grad @ d
        t = 1.0
        while t > 1e-12:
            f1, g1 = f + t * d[:n], g + t * d[n:]
            P1 = plan(f1, g1)
            D1 = f1 @ r + g1 @ c - P1.sum()
            if np.isfinite(D1) and D1 >= D + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            return f, g, step, False
        f, g, P, D = f1, g1, P1, D1
        if _violation(P, r, c) < tol:
            return f, g, step, True
    return f, g, max_steps, False


def round_to_marginals(P: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Project a near-feasible plan onto U(r, c).

    Rows and columns are scaled down to their targets, then the leftover
    mass is put back as a rank-one term. The result is feasible up to
    rounding and moves the cost by at most 2 * max(M) * (violation).
    """
    rs = P.sum(1)
    x = np.minimum(1.0, np.divide(r, rs, out=np.ones_like(r), where=rs > 0))
    P = P * x[:, None]
    cs = P.sum(0)
    y = np.minimum(1.0, np.divide(c, cs, out=np.ones_like(c), where=cs > 0))
    P = P * y[None, :]
    er = np.maximum(r - P.sum(1), 0.0)
    ec = np.maximum(c - P.sum(0), 0.0)
    mass = er.sum()
    if mass > 0:
        P = P + np.outer(er, ec) / mass
    return P


def sinkhorn_grad_cost(plan: TransportPlan) -> np.ndarray:
    """Envelope gradient of <P, M> w.r.t. M: the plan itself."""
    return plan.P.copy()


def sinkhorn_grad_cost_implicit(plan: TransportPlan, M, lam: float) -> np.ndarray:
    """Exact gradient of <P*(M), M> w.r.t. M at the Sinkhorn fixed point.

    With P_ij = exp(f_i + g_j - lam M_ij), perturbing M moves the dual
    potentials through the marginal constraints. One adjoint solve with the
    constraint Jacobian gives
    G_ij = P_ij + lam * P_ij * (x_i + y_j - M_ij).
    """
    M = np.asarray(M, dtype=np.float64)
    P = plan.P
    n = P.shape[0]
    PM = P * M
    z = _solve_dual_system(P, np.concatenate([PM.sum(1), PM.sum(0)]))
    x, y = z[:n], z[n:]
    return P + lam * P * (x[:, None] + y[None, :] - M)


def basis_ot(Vk, Vj, lam: float = 10.0, max_iters: int = 1000, tol: float = 1e-9,
             gradient: str = "implicit", v0: np.ndarray | None = None) -> tuple[float, np.ndarray, TransportPlan]:
    """Sinkhorn cost between two basis sets and its gradient w.r.t. ``Vk``.

    ``gradient="envelope"`` holds the plan fixed; ``"implicit"`` also
    accounts for how the plan moves with the cost. Either cost gradient G is
    chained through the squared distances:
    d/dVk[a] = 2 * sum_b G[a, b] (Vk[a] - Vj[b]).
    """
    Vk = np.asarray(Vk, dtype=np.float64)
    Vj = np.asarray(Vj, dtype=np.float64)
    M = basis_cost_matrix(Vk, Vj).M
    cost, plan = sinkhorn(uniform(Vk.shape[0]), uniform(Vj.shape[0]), M, lam, max_iters, tol, v0)
    if gradient == "envelope":
        G = sinkhorn_grad_cost(plan)
    elif gradient == "implicit":
        G = sinkhorn_grad_cost_implicit(plan, M, lam)
    else:
        raise ValueError(f"unknown OT gradient mode {gradient!r}")
    A, Bf = _flat(Vk), _flat(Vj)
    grad = 2.0 * (G.sum(1)[:, None] * A - G @ Bf)
    return cost, grad.reshape(Vk.shape), plan
