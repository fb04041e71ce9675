"""RGCN entity classifier with basis-decomposed relation weights.

Layer update for node i::

    h_i' = act( sum_r sum_{j in N_i^r} W_r h_j / c_{i,r} + W_0 h_i ),
    W_r  = sum_b a_rb V_b

Hidden layers use ReLU; the last layer emits logits. Only the bases ``V``
are meant to be shared between clients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from . import ot
from .fedsplit import ClientShard
from .relgraph import NeighborIndex

STRATEGIES = ("FedAVG", "FedProx", "FedAlign", "SP")


@dataclass
class LayerParams:
    basis: np.ndarray  # (B, d_out, d_in)
    coeff: np.ndarray  # (R_eff, B)
    w0: np.ndarray  # (d_out, d_in)

    @property
    def d_in(self) -> int:
        return self.basis.shape[2]

    @property
    def d_out(self) -> int:
        return self.basis.shape[1]

    def copy(self) -> "LayerParams":
        return LayerParams(self.basis.copy(), self.coeff.copy(), self.w0.copy())


@dataclass
class RgcnParams:
    embeddings: np.ndarray  # (num_nodes, d0)
    layers: list[LayerParams] = field(default_factory=list)

    def __post_init__(self):
        d = self.embeddings.shape[1]
        for k, layer in enumerate(self.layers):
            if layer.d_in != d:
                raise ValueError(f"layer {k} expects input width {layer.d_in}, got {d}")
            if layer.coeff.shape[1] != layer.basis.shape[0] or layer.w0.shape != layer.basis.shape[1:]:
                raise ValueError(f"layer {k} has inconsistent parameter shapes")
            d = layer.d_out

    @property
    def bases(self) -> list[np.ndarray]:
        return [layer.basis for layer in self.layers]

    def set_bases(self, bases: Sequence[np.ndarray]) -> None:
        for layer, b in zip(self.layers, bases):
            if b.shape != layer.basis.shape:
                raise ValueError(f"basis shape {b.shape} does not match {layer.basis.shape}")
            layer.basis = np.array(b, dtype=np.float64, copy=True)

    def copy(self) -> "RgcnParams":
        return RgcnParams(self.embeddings.copy(), [layer.copy() for layer in self.layers])

    def arrays(self) -> list[np.ndarray]:
        out = [self.embeddings]
        for layer in self.layers:
            out += [layer.basis, layer.coeff, layer.w0]
        return out


def init_layer(d_in, d_out, n_rel, n_bases, rng) -> LayerParams:
    lim = 1.0 / np.sqrt(d_in)
    return LayerParams(
        basis=rng.uniform(-lim, lim, size=(n_bases, d_out, d_in)),
        coeff=rng.uniform(-1.0 / np.sqrt(n_bases), 1.0 / np.sqrt(n_bases), size=(n_rel, n_bases)),
        w0=rng.uniform(-lim, lim, size=(d_out, d_in)),
    )


def init_params(num_nodes, n_rel, n_classes, n_bases=100, d0=16, hidden=(16,), rng=None) -> RgcnParams:
    """Random parameters; ``hidden`` lists the widths of the ReLU layers."""
    rng = np.random.default_rng(rng)
    lim = 1.0 / np.sqrt(d0)
    emb = rng.uniform(-lim, lim, size=(num_nodes, d0))
    dims = [d0, *hidden, n_classes]
    layers = [init_layer(dims[k], dims[k + 1], n_rel, n_bases, rng) for k in range(len(dims) - 1)]
    return RgcnParams(emb, layers)


def compose_relation_weights(layer: LayerParams) -> np.ndarray:
    """W_r = sum_b a_rb V_b for every relation; shape (R_eff, d_out, d_in)."""
    return np.einsum("rb,boi->roi", layer.coeff, layer.basis)


@dataclass
class LayerVars:
    basis: nk.Var
    coeff: nk.Var
    w0: nk.Var


@dataclass
class TapedParams:
    embeddings: nk.Var
    layers: list[LayerVars]

    def bases(self) -> list[nk.Var]:
        return [lv.basis for lv in self.layers]

    def all(self) -> list[nk.Var]:
        out = [self.embeddings]
        for lv in self.layers:
            out += [lv.basis, lv.coeff, lv.w0]
        return out


def bind(tape: nk.Tape, params: RgcnParams) -> TapedParams:
    """Put every parameter array on the tape as a leaf."""
    layers = [
        LayerVars(tape.leaf(lp.basis, f"layer{k}.basis"), tape.leaf(lp.coeff, f"layer{k}.coeff"),
                  tape.leaf(lp.w0, f"layer{k}.w0"))
        for k, lp in enumerate(params.layers)
    ]
    return TapedParams(tape.leaf(params.embeddings, "embeddings"), layers)


def layer_forward(tape: nk.Tape, layer: LayerVars, idx: NeighborIndex, H: nk.Var, activation: bool = True) -> nk.Var:
    B, d_out, d_in = layer.basis.shape
    n_rel = layer.coeff.shape[0]
    if H.shape != (idx.num_nodes, d_in):
        raise nk.ShapeError(f"layer_forward: H has shape {H.shape}, expected {(idx.num_nodes, d_in)}")
    if n_rel != idx.num_effective:
        raise nk.ShapeError(f"layer_forward: {n_rel} relation coefficients for {idx.num_effective} relations")
    flat = nk.reshape(layer.basis, (B, d_out * d_in))
    # rows r*d_out:(r+1)*d_out of w_all hold W_r
    w_all = nk.reshape(nk.matmul(layer.coeff, flat), (n_rel * d_out, d_in))
    msgs = nk.matmul(H, nk.transpose(w_all))
    out = nk.add(nk.relgather(idx.stacked, msgs, n_rel), nk.matmul(H, nk.transpose(layer.w0)))
    return nk.relu(out) if activation else out


def forward(tape: nk.Tape, tp: TapedParams, idx: NeighborIndex) -> nk.Var:
    H = tp.embeddings
    last = len(tp.layers) - 1
    for k, lv in enumerate(tp.layers):
        H = layer_forward(tape, lv, idx, H, activation=k < last)
    return H


def predict(params: RgcnParams, idx: NeighborIndex) -> np.ndarray:
    tape = nk.Tape()
    return forward(tape, bind(tape, params), idx).value


def classification_loss(tape: nk.Tape, tp: TapedParams, shard: ClientShard, idx: NeighborIndex) -> nk.Var:
    """Mean softmax cross-entropy over the shard's training nodes only."""
    rows = list(shard.train_ids)
    if not rows:
        raise ValueError("shard has no training nodes")
    labels = [shard.graph.labels[i] for i in rows]
    return nk.softmax_xent(forward(tape, tp, idx), rows, labels)


def grad_penalty(tape: nk.Tape, tp: TapedParams, shard: ClientShard, idx: NeighborIndex, lam: float,
                 loss: nk.Var | None = None) -> nk.Var:
    """lam * (||d loss / d embeddings||_2 - 1)^2, differentiable w.r.t. the weights."""
    if lam < 0:
        raise ValueError("penalty weight must be nonnegative")
    if loss is None:
        loss = classification_loss(tape, tp, shard, idx)
    (g,) = nk.backward(tape, loss, [tp.embeddings])
    dev = nk.sub(nk.l2norm(g), tape.constant(1.0))
    return nk.scale(nk.square(dev), lam)


def alignment_term(bases: Sequence[np.ndarray], peer_bases: Sequence[Sequence[np.ndarray]], mu: float,
                   n_clients: int | None = None, sinkhorn_lambda: float = 10.0, max_iters: int = 1000,
                   tol: float = 1e-9, gradient: str = "implicit",
                   warm: dict | None = None) -> tuple[float, list[np.ndarray]]:
    """(mu / N) * sum over peers and layers of the Sinkhorn cost between basis sets.

    Peers are constants; the gradient is w.r.t. ``bases`` only. ``N``
    defaults to the number of peers plus one. ``warm`` caches Sinkhorn
    scalings per (peer, layer) across calls with slowly moving bases.
    """
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    n = n_clients if n_clients is not None else len(peer_bases) + 1
    value = 0.0
    grads = [np.zeros_like(b) for b in bases]
    if mu == 0:
        return 0.0, grads
    for p_idx, peer in enumerate(peer_bases):
        if len(peer) != len(bases):
            raise ValueError("peer has a different number of layers")
        for l, (own, other) in enumerate(zip(bases, peer)):
            if np.shape(own) != np.shape(other):
                raise ValueError(f"layer {l}: basis shape {np.shape(own)} vs peer {np.shape(other)}")
            v0 = warm.get((p_idx, l)) if warm is not None else None
            cost, g, plan = ot.basis_ot(own, other, sinkhorn_lambda, max_iters, tol, gradient, v0)
            if warm is not None:
                warm[(p_idx, l)] = plan.v
            value += cost
            grads[l] += g
    s = mu / n
    return s * value, [s * g for g in grads]


def proximal_term(tp: TapedParams, global_bases: Sequence[np.ndarray], mu: float) -> nk.Var:
    """(mu / 2) * ||V - V_global||^2 over the shared bases."""
    tape = tp.embeddings.tape
    total = None
    for v, g in zip(tp.bases(), global_bases):
        sq = nk.sum(nk.square(nk.sub(v, tape.constant(g))))
        total = sq if total is None else nk.add(total, sq)
    return nk.scale(total, mu / 2.0)


def local_loss(tape: nk.Tape, tp: TapedParams, shard: ClientShard, idx: NeighborIndex, strategy: str = "FedAVG",
               *, mu: float = 0.0, lam: float = 0.0, lipschitz: bool = False, peer_bases=None,
               global_bases=None, n_clients: int | None = None, sinkhorn_lambda: float = 10.0,
               ot_gradient: str = "implicit", ot_warm: dict | None = None) -> nk.Var:
    """Per-client training objective for the given strategy.

    FedAVG/SP: F_k. FedProx: F_k + proximal term on the bases. FedAlign:
    F_k + basis alignment against ``peer_bases``. With ``lipschitz`` the
    gradient penalty is added on top.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    F = classification_loss(tape, tp, shard, idx)
    total = F
    if strategy == "FedProx":
        if global_bases is None:
            raise ValueError("FedProx needs global_bases")
        total = nk.add(total, proximal_term(tp, global_bases, mu))
    elif strategy == "FedAlign":
        if peer_bases is None:
            raise ValueError("FedAlign needs peer_bases")
        value, grads = alignment_term([v.value for v in tp.bases()], peer_bases, mu, n_clients,
                                      sinkhorn_lambda, gradient=ot_gradient, warm=ot_warm)
        total = nk.add(total, nk.surrogate(tp.bases(), value, grads))
    if lipschitz:
        total = nk.add(total, grad_penalty(tape, tp, shard, idx, lam, loss=F))
    return total


def save_checkpoint(params: RgcnParams, path: str | Path) -> None:
    """Write parameters as little-endian float64 arrays in an ``.npz`` archive."""
    arrays = {"embeddings": params.embeddings.astype("<f8")}
    for l, layer in enumerate(params.layers):
        for b in range(layer.basis.shape[0]):
            arrays[f"layer{l}.basis{b}"] = layer.basis[b].astype("<f8")
        arrays[f"layer{l}.coeff"] = layer.coeff.astype("<f8")
        arrays[f"layer{l}.w0"] = layer.w0.astype("<f8")
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path: str | Path) -> RgcnParams:
    with np.load(path) as z:
        keys = set(z.files)
        layers = []
        l = 0
        while f"layer{l}.coeff" in keys:
            n_b = z[f"layer{l}.coeff"].shape[1]
            basis = np.stack([z[f"layer{l}.basis{b}"] for b in range(n_b)])
            layers.append(LayerParams(basis, z[f"layer{l}.coeff"].astype(np.float64), z[f"layer{l}.w0"].astype(np.float64)))
            l += 1
        return RgcnParams(z["embeddings"].astype(np.float64), layers)
