"""Planted-signal typed graphs for experiments without external datasets.

Every node gets a latent community. Each relation links one source type to
one destination type, and an edge lands in the source's community with
probability ``homophily``. Nodes of type 0 are the classification targets:
a labeled node's class is the majority community among its neighbors, so
the label is recoverable from structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .relgraph import RelGraph


@dataclass(frozen=True)
class SyntheticSpec:
    nodes: int = 600
    types: int = 5
    relations: int = 4
    density: float = 3.0  # mean out-edges per source node, per relation
    classes: int = 4
    label_fraction: float = 0.5  # share of type-0 nodes that get a label
    train_fraction: float = 0.8
    homophily: float = 0.8
    target_share: float | None = None  # fraction of nodes in type 0; uniform when None
    type_skew: float = 0.0  # unlabeled type t >= 1 gets weight t**-type_skew

    def validate(self) -> None:
        if self.nodes < 2 or self.types < 2 or self.relations < 1 or self.classes < 2:
            raise ValueError("synthetic spec needs >=2 nodes, >=2 types, >=1 relation, >=2 classes")
        if not 0 < self.label_fraction <= 1 or not 0 < self.train_fraction < 1:
            raise ValueError("label_fraction must be in (0, 1] and train_fraction in (0, 1)")
        if not 0 <= self.homophily <= 1 or self.density <= 0:
            raise ValueError("homophily must be in [0, 1] and density positive")
        if self.type_skew < 0:
            raise ValueError("type_skew must be nonnegative")


def generate(spec: SyntheticSpec, seed: int = 0) -> RelGraph:
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.nodes
    if spec.target_share is None and spec.type_skew == 0:
        node_type = rng.integers(0, spec.types, size=n)
    else:
        share = 1.0 / spec.types if spec.target_share is None else spec.target_share
        w = np.arange(1, spec.types, dtype=np.float64) ** -spec.type_skew
        p = np.concatenate([[share], (1.0 - share) * w / w.sum()])
        node_type = rng.choice(spec.types, size=n, p=p)
    node_type[: spec.types] = np.arange(spec.types)  # every type is populated
    community = rng.integers(0, spec.classes, size=n)

    members = {(t, c): np.flatnonzero((node_type == t) & (community == c))
               for t in range(spec.types) for c in range(spec.classes)}
    by_type = {t: np.flatnonzero(node_type == t) for t in range(spec.types)}

    # relation r links type (r mod T) ... with half of the relations touching type 0
    schemas = []
    for r in range(spec.relations):
        if r % 2 == 0:
            schemas.append((0, 1 + (r // 2) % (spec.types - 1)))
        else:
            s = int(rng.integers(1, spec.types))
            schemas.append((s, int(rng.integers(0, spec.types))))

    edges = set()
    for r, (ts, td) in enumerate(schemas):
        for i in by_type[ts]:
            k = rng.poisson(spec.density)
            for _ in range(k):
                same = members[(td, community[i])]
                pool = same if (rng.random() < spec.homophily and len(same)) else by_type[td]
                j = int(pool[rng.integers(len(pool))])
                if j != i:
                    edges.add((int(i), r, j))
    edges = np.array(sorted(edges), dtype=np.int64).reshape(-1, 3)

    neigh_votes = np.zeros((n, spec.classes), dtype=np.int64)
    np.add.at(neigh_votes, (edges[:, 0], community[edges[:, 2]]), 1)
    np.add.at(neigh_votes, (edges[:, 2], community[edges[:, 0]]), 1)

    targets = by_type[0]
    n_lab = max(2, int(round(spec.label_fraction * len(targets))))
    labeled = np.sort(rng.choice(targets, size=min(n_lab, len(targets)), replace=False))
    labels = {}
    for i in labeled:
        v = neigh_votes[i]
        labels[int(i)] = int(v.argmax()) if v.max() > 0 else int(community[i])
    order = rng.permutation(labeled)
    n_train = max(1, int(round(spec.train_fraction * len(order))))
    return RelGraph(
        num_nodes=n,
        num_relations=spec.relations,
        edges=edges,
        node_type=node_type,
        labels=labels,
        train_ids=tuple(sorted(int(i) for i in order[:n_train])),
        test_ids=tuple(sorted(int(i) for i in order[n_train:])),
        class_names=tuple(f"c{c}" for c in range(spec.classes)),
    )
