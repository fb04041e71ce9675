"""Partition one relational graph into N heterogeneous client shards.

Per shard: pick a handful of unlabeled node types, keep a uniformly sized
random subset of each, add a disjoint slice of the training labels and
every test node, then keep the edges whose endpoints both survived.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .relgraph import RelGraph, write_graph


@dataclass(frozen=True)
class ClientShard:
    graph: RelGraph  # local ids; relation ids stay global
    to_global: np.ndarray  # local id -> global id

    @property
    def train_ids(self) -> tuple[int, ...]:
        return self.graph.train_ids

    @property
    def test_ids(self) -> tuple[int, ...]:
        return self.graph.test_ids

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_edges(self) -> int:
        return len(self.graph.edges)


@dataclass(frozen=True)
class SummaryStat:
    mean: float
    std: float

    def __str__(self) -> str:
        return f"{self.mean:.2f} ± {self.std:.2f}"


@dataclass(frozen=True)
class ShardStats:
    entities: tuple[int, ...]
    edges: tuple[int, ...]
    entity_stat: SummaryStat
    edge_stat: SummaryStat
    source_entities: int
    source_edges: int

    def table(self) -> str:
        lines = ["client\tentities\tedges"]
        for k, (n, e) in enumerate(zip(self.entities, self.edges)):
            lines.append(f"{k}\t{n}\t{e}")
        lines.append(f"mean±std\t{self.entity_stat}\t{self.edge_stat}")
        lines.append(f"source\t{self.source_entities}\t{self.source_edges}")
        return "\n".join(lines)


@dataclass(frozen=True)
class FederatedDataset:
    shards: tuple[ClientShard, ...]
    source: RelGraph

    @property
    def n_clients(self) -> int:
        return len(self.shards)


def mean_std(values) -> SummaryStat:
    """Mean and population standard deviation (divide by N)."""
    a = np.asarray(values, dtype=np.float64)
    return SummaryStat(float(a.mean()), float(a.std()))


def unlabeled_types(g: RelGraph) -> list[int]:
    mask = np.ones(g.num_nodes, dtype=bool)
    mask[list(g.labels)] = False
    return sorted(set(g.node_type[mask].tolist()))


def induced_shard(g: RelGraph, keep: np.ndarray, train: set[int], test: set[int]) -> ClientShard:
    """Subgraph on the sorted global ids ``keep`` with edges closed over it."""
    keep = np.asarray(keep, dtype=np.int64)
    local = -np.ones(g.num_nodes, dtype=np.int64)
    local[keep] = np.arange(len(keep))
    e = g.edges
    m = (local[e[:, 0]] >= 0) & (local[e[:, 2]] >= 0)
    le = np.stack([local[e[m, 0]], e[m, 1], local[e[m, 2]]], axis=1) if m.any() else np.zeros((0, 3), np.int64)
    labels = {int(local[i]): g.labels[i] for i in keep.tolist() if i in train or i in test}
    sub = RelGraph(
        num_nodes=len(keep),
        num_relations=g.num_relations,
        edges=le,
        node_type=g.node_type[keep],
        labels=labels,
        train_ids=tuple(int(local[i]) for i in sorted(train)),
        test_ids=tuple(int(local[i]) for i in sorted(test)),
        node_names=tuple(g.node_names[i] for i in keep) if g.node_names else None,
        rel_names=g.rel_names,
        type_names=g.type_names,
        class_names=g.class_names,
    )
    return ClientShard(sub, keep)


def federated_split(
    g: RelGraph,
    n_clients: int,
    types_to_keep: int = 6,
    seed: int = 0,
    shared_type_choice: bool = False,
) -> FederatedDataset:
    if n_clients < 2:
        raise ValueError("n_clients must be at least 2")
    if n_clients > len(g.train_ids):
        raise ValueError(f"n_clients={n_clients} exceeds training-set size {len(g.train_ids)}")
    types = unlabeled_types(g)
    if types_to_keep > len(types):
        raise ValueError(f"types_to_keep={types_to_keep} exceeds the {len(types)} unlabeled node types")
    if types_to_keep < 1:
        raise ValueError("types_to_keep must be positive")

    rng = np.random.default_rng(seed)
    labeled = np.zeros(g.num_nodes, dtype=bool)
    labeled[list(g.labels)] = True
    by_type = {t: np.flatnonzero((g.node_type == t) & ~labeled) for t in types}

    global_choice = rng.choice(types, size=types_to_keep, replace=False) if shared_type_choice else None
    sampled: list[np.ndarray] = []
    for _ in range(n_clients):
        chosen = global_choice if shared_type_choice else rng.choice(types, size=types_to_keep, replace=False)
        parts = []
        for t in sorted(int(x) for x in chosen):
            pool = by_type[t]
            count = int(rng.integers(0, len(pool), endpoint=True))
            parts.append(rng.choice(pool, size=count, replace=False))
        sampled.append(np.concatenate(parts) if parts else np.zeros(0, np.int64))

    train = np.array(g.train_ids, dtype=np.int64)
    rng.shuffle(train)
    dealt = np.array_split(train, n_clients)
    test = set(g.test_ids)

    shards = []
    for k in range(n_clients):
        keep = np.union1d(np.union1d(sampled[k], dealt[k]), np.array(sorted(test), dtype=np.int64))
        shards.append(induced_shard(g, keep, set(dealt[k].tolist()), test))
    return FederatedDataset(tuple(shards), g)


def shard_stats(fd: FederatedDataset) -> ShardStats:
    ent = tuple(s.num_nodes for s in fd.shards)
    edg = tuple(s.num_edges for s in fd.shards)
    return ShardStats(ent, edg, mean_std(ent), mean_std(edg), fd.source.num_nodes, len(fd.source.edges))


def export_split(fd: FederatedDataset, directory: str | Path) -> None:
    """One TSV graph directory per client (``client_00`` ...)."""
    out = Path(directory)
    for k, shard in enumerate(fd.shards):
        g = shard.graph
        if g.node_names is None:
            names = tuple(f"n{i}" for i in shard.to_global)
            g = RelGraph(g.num_nodes, g.num_relations, g.edges, g.node_type, g.labels,
                         g.train_ids, g.test_ids, names, g.rel_names, g.type_names, g.class_names)
        write_graph(g, out / f"client_{k:02d}")
