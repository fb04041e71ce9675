"""In-process federation: basis exchange, aggregation and evaluation.

Each round the server broadcasts the global bases (plus the peers' bases
from the end of the previous round for FedAlign), every client runs
``local_epochs`` full-graph SGD steps on its own objective, and the server
averages the returned basis deltas. Embeddings, relation coefficients and
self-loop weights never leave a client.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numkernel as nk
from . import ot, rgcn
from .fedsplit import ClientShard, FederatedDataset
from .relgraph import NeighborIndex, build_neighbor_index

log = logging.getLogger(__name__)

AGGREGATIONS = ("size_weighted", "eq6_normalized", "mean")
B_UNDEFINED = float("nan")
ROUND_LOG_COLUMNS = ("round", "strategy", "seed", "client_id", "train_loss", "ot_mean", "b_hat", "test_acc", "ms")


class NumericFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "FedAVG"
    lipschitz: bool = False
    mu: float = 10.0
    lam: float = 10.0
    lr: float = 0.1
    local_epochs: int = 5
    global_epochs: int = 20
    n_clients: int = 10
    aggregation: str = "size_weighted"
    sinkhorn_lambda: float = 10.0
    ot_gradient: str = "implicit"
    share_coeffs: bool = False

    def __post_init__(self):
        if self.kind not in rgcn.STRATEGIES:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.kind in ("FedAVG", "SP"):
            object.__setattr__(self, "mu", 0.0)
        if not self.lipschitz:
            object.__setattr__(self, "lam", 0.0)
        if self.mu < 0 or self.lam < 0:
            raise ValueError("mu and lambda must be nonnegative")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.local_epochs < 1 or self.global_epochs < 1 or self.n_clients < 1:
            raise ValueError("epoch and client counts must be positive")

    @property
    def name(self) -> str:
        return self.kind + ("-L" if self.lipschitz else "")

    @classmethod
    def from_name(cls, name: str, **kw) -> "StrategyConfig":
        """``"FedAlign-L"`` -> kind FedAlign with the gradient penalty on."""
        lip = name.endswith("-L")
        return cls(kind=name[:-2] if lip else name, lipschitz=lip, **kw)


@dataclass
class ClientState:
    client_id: int
    params: rgcn.RgcnParams
    shard: ClientShard
    idx: NeighborIndex
    peer_bases: tuple = ()
    last_loss: float = math.nan
    ot_warm: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.shard.num_nodes


@dataclass
class ServerState:
    global_shared: list[np.ndarray]
    snapshots: list[list[np.ndarray]]
    seed: int = 0
    round: int = 0


@dataclass(frozen=True)
class RoundRecord:
    round: int
    train_loss: tuple[float, ...]
    test_acc: float
    ot_mean: float
    b_hat: float
    wall_ms: float = 0.0


def client_rng(master_seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(client_id)])


# --- shared-parameter plumbing -------------------------------------------


def shared_arrays(params: rgcn.RgcnParams, share_coeffs: bool = False) -> list[np.ndarray]:
    out = [layer.basis for layer in params.layers]
    if share_coeffs:
        out += [layer.coeff for layer in params.layers]
    return [a.copy() for a in out]


def load_shared(params: rgcn.RgcnParams, shared: Sequence[np.ndarray], share_coeffs: bool = False) -> None:
    L = len(params.layers)
    params.set_bases(shared[:L])
    if share_coeffs:
        for layer, c in zip(params.layers, shared[L:]):
            layer.coeff = np.array(c, dtype=np.float64, copy=True)


# --- client side -----------------------------------------------------------


def _loss(tape, tp, state: ClientState, cfg: StrategyConfig, global_shared):
    L = len(state.params.layers)
    return rgcn.local_loss(
        tape, tp, state.shard, state.idx, cfg.kind,
        mu=cfg.mu, lam=cfg.lam, lipschitz=cfg.lipschitz,
        peer_bases=[p[:L] for p in state.peer_bases],
        global_bases=global_shared[:L] if global_shared is not None else None,
        n_clients=cfg.n_clients, sinkhorn_lambda=cfg.sinkhorn_lambda, ot_gradient=cfg.ot_gradient,
        ot_warm=state.ot_warm,
    )


def sgd_step(state: ClientState, cfg: StrategyConfig, global_shared) -> float:
    """One full-graph SGD step on every local parameter; returns F_k before the step."""
    tape = nk.Tape()
    tp = rgcn.bind(tape, state.params)
    total = _loss(tape, tp, state, cfg, global_shared)
    grads = nk.grad_values(tape, total, tp.all())
    arrays = state.params.arrays()
    for a, g in zip(arrays, grads):
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"client {state.client_id}: non-finite gradient")
    for a, g in zip(arrays, grads):
        a -= cfg.lr * g
        if not np.all(np.isfinite(a)):
            raise NumericFailure(f"client {state.client_id}: parameters overflowed after an SGD step")
    # the classification loss is the first softmax_xent node on the tape
    f = next(n.value for n in tape.nodes if n.op == "softmax_xent")
    return float(f)


def client_local_update(state: ClientState, cfg: StrategyConfig, global_shared: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Reset the shared arrays to the global ones, train, and return the shared delta."""
    for g, a in zip(global_shared, shared_arrays(state.params, cfg.share_coeffs)):
        if np.shape(g) != a.shape:
            raise ValueError(f"global array shape {np.shape(g)} does not match local {a.shape}")
    if cfg.kind != "SP":
        load_shared(state.params, global_shared, cfg.share_coeffs)
    state.ot_warm.clear()
    start = shared_arrays(state.params, cfg.share_coeffs)
    try:
        for _ in range(cfg.local_epochs):
            state.last_loss = sgd_step(state, cfg, global_shared)
    except OverflowError as e:
        raise NumericFailure(f"client {state.client_id}: {e}") from None
    return [new - old for new, old in zip(shared_arrays(state.params, cfg.share_coeffs), start)]


# --- server side -----------------------------------------------------------


def aggregate(deltas: Sequence[Sequence[np.ndarray]], node_counts: Sequence[float], mode: str = "size_weighted") -> list[np.ndarray]:
    """Combine per-client deltas (each a list of arrays) into one.

    size_weighted: sum_k (n_k / n) delta_k; eq6_normalized:
    (1 / K) sum_k delta_k / n_k; mean: (1 / K) sum_k delta_k.
    """
    if not deltas:
        raise ValueError("nothing to aggregate")
    K = len(deltas)
    counts = np.asarray(node_counts, dtype=np.float64)
    if len(counts) != K:
        raise ValueError("one node count per client is required")
    if mode == "size_weighted":
        weights = counts / counts.sum()
    elif mode == "eq6_normalized":
        if (counts == 0).any():
            raise ValueError("zero node count in eq6_normalized aggregation")
        weights = 1.0 / (K * counts)
    elif mode == "mean":
        weights = np.full(K, 1.0 / K)
    else:
        raise ValueError(f"unknown aggregation {mode!r}")
    out = []
    for parts in zip(*deltas):
        shape = np.shape(parts[0])
        if any(np.shape(p) != shape for p in parts):
            raise ValueError("delta shapes differ between clients")
        acc = np.zeros(shape)
        for w, p in zip(weights, parts):
            acc = acc + w * np.asarray(p)
        out.append(acc)
    return out


def basis_gradient(state: ClientState) -> np.ndarray:
    """Flattened gradient of F_k w.r.t. all bases at the client's current parameters."""
    tape = nk.Tape()
    tp = rgcn.bind(tape, state.params)
    F = rgcn.classification_loss(tape, tp, state.shard, state.idx)
    return np.concatenate([g.ravel() for g in nk.grad_values(tape, F, tp.bases())])


def b_dissimilarity(grads: Sequence[np.ndarray]) -> float:
    """sqrt(mean_k ||g_k||^2 / ||mean_k g_k||^2); NaN when the mean gradient vanishes."""
    G = np.stack([np.asarray(g, dtype=np.float64).ravel() for g in grads])
    if (G == G[0]).all() and G[0].any():
        return 1.0  # equality case; the averaged form can be off by an ulp
    num = float((G * G).sum(1).mean())
    mean = G.mean(0)
    den = float(mean @ mean)
    if den == 0.0:
        return B_UNDEFINED
    return math.sqrt(num / den)


def client_b_dissimilarity(clients: Sequence[ClientState], global_bases: Sequence[np.ndarray]) -> float:
    """B-hat at the global point: each client's gradient with the global bases loaded."""
    grads = []
    for c in clients:
        saved = [b.copy() for b in c.params.bases]
        c.params.set_bases(global_bases)
        try:
            grads.append(basis_gradient(c))
        finally:
            c.params.set_bases(saved)
    return b_dissimilarity(grads)


def majority_vote(predictions: Sequence[int], n_classes: int) -> int:
    """Most frequent class; ties go to the lowest class id."""
    return int(np.bincount(np.asarray(predictions, dtype=np.int64), minlength=n_classes).argmax())


def evaluate_global(server: ServerState, clients: Sequence[ClientState], cfg: StrategyConfig | None = None) -> float:
    """Load the global shared arrays into every client and vote across shards per test node."""
    share = cfg.share_coeffs if cfg is not None else False
    for c in clients:
        load_shared(c.params, server.global_shared, share)
    return vote_accuracy(clients)


def vote_accuracy(clients: Sequence[ClientState]) -> float:
    votes: dict[int, list[int]] = {}
    truth: dict[int, int] = {}
    n_classes = 0
    for c in clients:
        g = c.shard.graph
        if not g.test_ids:
            continue
        logits = rgcn.predict(c.params, c.idx)
        n_classes = max(n_classes, logits.shape[1])
        pred = logits.argmax(1)
        for i in g.test_ids:
            gid = int(c.shard.to_global[i])
            votes.setdefault(gid, []).append(int(pred[i]))
            truth[gid] = g.labels[i]
    if not votes:
        raise ValueError("no test nodes in any shard")
    correct = sum(majority_vote(votes[t], n_classes) == truth[t] for t in sorted(votes))
    return correct / len(votes)


def mean_pairwise_ot(bases: Sequence[Sequence[np.ndarray]], sinkhorn_lambda: float = 10.0) -> float:
    """Mean over client pairs of the per-layer Sinkhorn costs summed over layers."""
    vals = []
    for j in range(len(bases)):
        for k in range(j + 1, len(bases)):
            try:
                vals.append(sum(ot.basis_ot(a, b, sinkhorn_lambda)[0] for a, b in zip(bases[j], bases[k])))
            except OverflowError as e:
                raise NumericFailure(f"clients {j} and {k}: {e}") from None
    return float(np.mean(vals)) if vals else 0.0


def run_round(server: ServerState, clients: Sequence[ClientState], cfg: StrategyConfig,
              executor: ThreadPoolExecutor | None = None, track_ot: bool = True) -> RoundRecord:
    t0 = time.perf_counter()
    L = len(clients[0].params.layers)
    global_prev = [a.copy() for a in server.global_shared]
    b_hat = client_b_dissimilarity(clients, global_prev[:L]) if cfg.kind != "SP" else B_UNDEFINED

    for k, c in enumerate(clients):
        c.peer_bases = tuple(tuple(server.snapshots[j]) for j in range(len(clients)) if j != k) if cfg.kind == "FedAlign" else ()

    def work(c):
        return client_local_update(c, cfg, global_prev)

    if executor is not None:
        deltas = list(executor.map(work, clients))
    else:
        deltas = [work(c) for c in clients]

    local_bases = [[b.copy() for b in c.params.bases] for c in clients]
    if cfg.kind == "SP":
        counts = [c.n_nodes for c in clients]
        merged = aggregate([shared_arrays(c.params, cfg.share_coeffs) for c in clients], counts, "size_weighted")
        server.global_shared = merged
        saved = [shared_arrays(c.params, cfg.share_coeffs) for c in clients]
        acc = evaluate_global(server, clients, cfg)
        for c, s in zip(clients, saved):
            load_shared(c.params, s, cfg.share_coeffs)
    else:
        agg = aggregate(deltas, [c.n_nodes for c in clients], cfg.aggregation)
        server.global_shared = [p + d for p, d in zip(global_prev, agg)]
        acc = evaluate_global(server, clients, cfg)
    server.snapshots = [[b.copy() for b in lb] for lb in local_bases]
    server.round += 1
    ot_mean = mean_pairwise_ot(local_bases, cfg.sinkhorn_lambda) if track_ot and len(clients) > 1 else 0.0
    return RoundRecord(
        round=server.round,
        train_loss=tuple(c.last_loss for c in clients),
        test_acc=acc,
        ot_mean=ot_mean,
        b_hat=b_hat,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )


# --- setup -----------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    n_bases: int = 100
    d0: int = 16
    hidden: tuple[int, ...] = (16,)
    inverse_relations: bool = True


def init_federation(fd: FederatedDataset, cfg: StrategyConfig, model: ModelConfig = ModelConfig(), seed: int = 0,
                    client_seeds: Sequence[int] | None = None) -> tuple[ServerState, list[ClientState]]:
    """Server with freshly initialized global bases and one client per shard."""
    g = fd.source
    n_rel = g.num_relations * (2 if model.inverse_relations else 1)
    n_classes = g.num_classes
    server_rng = np.random.default_rng([int(seed), 2**32 - 1])
    template = rgcn.init_params(1, n_rel, n_classes, model.n_bases, model.d0, model.hidden, server_rng)
    global_shared = shared_arrays(template, cfg.share_coeffs)
    clients = []
    for k, shard in enumerate(fd.shards):
        rng = client_rng(seed if client_seeds is None else client_seeds[k], k if client_seeds is None else 0)
        params = rgcn.init_params(shard.num_nodes, n_rel, n_classes, model.n_bases, model.d0, model.hidden, rng)
        load_shared(params, global_shared, cfg.share_coeffs)
        idx = build_neighbor_index(shard.graph, model.inverse_relations)
        clients.append(ClientState(k, params, shard, idx))
    L = len(template.layers)
    server = ServerState(global_shared, [[a.copy() for a in global_shared[:L]] for _ in fd.shards], seed=seed)
    return server, clients


def run_federation(fd: FederatedDataset, cfg: StrategyConfig, model: ModelConfig = ModelConfig(), seed: int = 0,
                   threads: int = 1, client_seeds: Sequence[int] | None = None, track_ot: bool = True,
                   on_round: Callable[[RoundRecord], None] | None = None) -> list[RoundRecord]:
    if cfg.n_clients != fd.n_clients:
        cfg = replace(cfg, n_clients=fd.n_clients)
    server, clients = init_federation(fd, cfg, model, seed, client_seeds)
    records = []
    executor = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for _ in range(cfg.global_epochs):
            rec = run_round(server, clients, cfg, executor, track_ot)
            log.info("%s seed=%d round=%d acc=%.4f", cfg.name, seed, rec.round, rec.test_acc)
            records.append(rec)
            if on_round is not None:
                on_round(rec)
    finally:
        if executor is not None:
            executor.shutdown()
    return records


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.10g}"


def round_log_rows(records: Sequence[RoundRecord], strategy: str, seed: int, timing: bool = False) -> list[list[str]]:
    """Rows for the round CSV: one per client plus a client_id=-1 global row per round."""
    rows = []
    for rec in records:
        ms = _fmt(rec.wall_ms) if timing else "0"
        for k, loss in enumerate(rec.train_loss):
            rows.append([str(rec.round), strategy, str(seed), str(k), _fmt(loss), "", "", "", ""])
        rows.append([str(rec.round), strategy, str(seed), "-1", _fmt(float(np.mean(rec.train_loss))),
                     _fmt(rec.ot_mean), _fmt(rec.b_hat), _fmt(rec.test_acc), ms])
    return rows


def write_round_log(path: str | Path, rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ROUND_LOG_COLUMNS)
        w.writerows(rows)
