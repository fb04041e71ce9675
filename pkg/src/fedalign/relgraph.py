"""Relational graph container, triple-file ingestion and in-neighbor indexing."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class GraphParseError(ValueError):
    pass


@dataclass(frozen=True)
class RelGraph:
    num_nodes: int
    num_relations: int
    edges: np.ndarray  # (E, 3) int64 rows of (src, rel, dst)
    node_type: np.ndarray  # (num_nodes,) int64
    labels: dict[int, int] = field(default_factory=dict)
    train_ids: tuple[int, ...] = ()
    test_ids: tuple[int, ...] = ()
    node_names: tuple[str, ...] | None = None
    rel_names: tuple[str, ...] | None = None
    type_names: tuple[str, ...] | None = None
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "node_type", np.asarray(self.node_type, dtype=np.int64))
        self.validate()

    @property
    def num_types(self) -> int:
        return int(self.node_type.max()) + 1 if self.num_nodes else 0

    @property
    def num_classes(self) -> int:
        if self.class_names is not None:
            return len(self.class_names)
        return max(self.labels.values()) + 1 if self.labels else 0

    def validate(self) -> None:
        e = self.edges
        if len(e):
            if e[:, [0, 2]].min() < 0 or e[:, [0, 2]].max() >= self.num_nodes:
                raise ValueError("edge endpoint out of range")
            if e[:, 1].min() < 0 or e[:, 1].max() >= self.num_relations:
                raise ValueError("relation id out of range")
            if len(np.unique(e, axis=0)) != len(e):
                raise ValueError("duplicate triples")
        if self.node_type.shape != (self.num_nodes,):
            raise ValueError("node_type length must equal num_nodes")
        for i in self.labels:
            if not 0 <= i < self.num_nodes:
                raise ValueError(f"labeled node {i} out of range")
        train, test = set(self.train_ids), set(self.test_ids)
        if train & test:
            raise ValueError("train and test sets overlap")
        missing = (train | test) - set(self.labels)
        if missing:
            raise ValueError(f"split ids without labels: {sorted(missing)[:5]}")


@dataclass(frozen=True, eq=False)
class NeighborIndex:
    """In-neighbors of every node per (effective) relation.

    For relation ``r`` the in-neighbors of node ``i`` are
    ``indices[r][indptr[r][i]:indptr[r][i + 1]]`` (sorted). When inverse
    relations are on, relation ``r + R`` holds the reversed edges of ``r``.
    """

    num_nodes: int
    num_relations: int  # R before inversion
    inverse_relations: bool
    indptr: tuple[np.ndarray, ...]
    indices: tuple[np.ndarray, ...]

    @property
    def num_effective(self) -> int:
        return len(self.indptr)

    def neighbors(self, i: int, r: int) -> np.ndarray:
        p = self.indptr[r]
        return self.indices[r][p[i]:p[i + 1]]

    def norm(self, i: int, r: int) -> float | None:
        """c_{i,r} = |N_i^r|, or None when node i has no in-neighbors under r."""
        k = len(self.neighbors(i, r))
        return float(k) if k else None

    def adjacency(self, r: int) -> sp.csr_matrix:
        """Row-normalized in-adjacency: entry (i, j) = 1 / c_{i,r} for j in N_i^r."""
        p = self.indptr[r]
        counts = np.diff(p)
        data = np.repeat(1.0 / np.maximum(counts, 1), counts)
        return sp.csr_matrix((data, self.indices[r], p), shape=(self.num_nodes, self.num_nodes))

    @cached_property
    def stacked(self) -> sp.csr_matrix:
        """``hstack`` of all normalized adjacencies, cached for repeated forwards."""
        return self.stacked_adjacency()

    def stacked_adjacency(self) -> sp.csr_matrix:
        return sp.hstack([self.adjacency(r) for r in range(self.num_effective)], format="csr")

    def flatten(self) -> list[tuple[int, int, int]]:
        """Original (src, rel, dst) triples, sorted; inverse relations excluded."""
        out = []
        for r in range(self.num_relations):
            p = self.indptr[r]
            for i in range(self.num_nodes):
                for j in self.indices[r][p[i]:p[i + 1]]:
                    out.append((int(j), r, i))
        out.sort()
        return out


def build_neighbor_index(g: RelGraph, inverse_relations: bool = True) -> NeighborIndex:
    n, R = g.num_nodes, g.num_relations
    src, rel, dst = g.edges[:, 0], g.edges[:, 1], g.edges[:, 2]
    indptr, indices = [], []
    passes = [(src, dst)]
    if inverse_relations:
        passes.append((dst, src))
    for s_arr, d_arr in passes:
        for r in range(R):
            m = rel == r
            s, d = s_arr[m], d_arr[m]
            order = np.lexsort((s, d))
            s, d = s[order], d[order]
            p = np.zeros(n + 1, dtype=np.int64)
            np.add.at(p, d + 1, 1)
            indptr.append(np.cumsum(p))
            indices.append(s.astype(np.int64))
    return NeighborIndex(n, R, inverse_relations, tuple(indptr), tuple(indices))


_NT_LINE = re.compile(r'^\s*(<[^>]*>|_:\S+)\s+(<[^>]*>)\s+(<[^>]*>|_:\S+|".*)\s*\.\s*$')


def _split_lines(text: str, fmt: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if fmt == "tsv":
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphParseError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
            yield lineno, parts, False
        elif fmt == "ntriples":
            m = _NT_LINE.match(line)
            if not m:
                raise GraphParseError(f"line {lineno}: not an N-Triples statement")
            s, p, o = m.groups()
            yield lineno, [s.strip("<>"), p.strip("<>"), o.strip("<>")], o.startswith('"')
        else:
            raise ValueError(f"unknown triple format {fmt!r}")


def _read_tsv(text: str, ncols: int, what: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != ncols:
            raise GraphParseError(f"{what} line {lineno}: expected {ncols} fields, got {len(parts)}")
        yield lineno, parts


def parse_triples(
    text: str,
    format: str = "tsv",
    labels_text: str | None = None,
    types_text: str | None = None,
    allow_empty: bool = False,
) -> RelGraph:
    """Build a RelGraph from triple text plus optional label and type TSVs.

    Ids are dense and assigned in order of first appearance. Duplicate
    triples are dropped with a warning; N-Triples literals are dropped and
    counted.
    """
    node_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    seen: set[tuple[int, int, int]] = set()
    edges: list[tuple[int, int, int]] = []
    dupes = literals = 0
    for _, (s, p, o), is_literal in _split_lines(text, format):
        if is_literal:
            literals += 1
            continue
        si = node_ids.setdefault(s, len(node_ids))
        ri = rel_ids.setdefault(p, len(rel_ids))
        oi = node_ids.setdefault(o, len(node_ids))
        t = (si, ri, oi)
        if t in seen:
            dupes += 1
            continue
        seen.add(t)
        edges.append(t)
    if not edges and not allow_empty:
        raise GraphParseError("empty graph")
    if dupes:
        log.warning("dropped %d duplicate triples", dupes)
    if literals:
        log.warning("dropped %d literal-valued triples", literals)

    type_rows = list(_read_tsv(types_text, 2, "type")) if types_text else []
    for _, (node, _t) in type_rows:
        # entities that only appear in the type file are isolated nodes
        node_ids.setdefault(node, len(node_ids))
    n = len(node_ids)
    node_type = np.zeros(n, dtype=np.int64)
    type_ids: dict[str, int] = {}
    if type_rows:
        declared = np.zeros(n, dtype=bool)
        for _, (node, tname) in type_rows:
            node_type[node_ids[node]] = type_ids.setdefault(tname, len(type_ids))
            declared[node_ids[node]] = True
        if not declared.all():
            node_type[~declared] = type_ids.setdefault("<untyped>", len(type_ids))
    else:
        type_ids["<untyped>"] = 0

    labels: dict[int, int] = {}
    train: list[int] = []
    test: list[int] = []
    class_ids: dict[str, int] = {}
    if labels_text:
        rows = list(_read_tsv(labels_text, 3, "label"))
        class_ids = {c: k for k, c in enumerate(sorted({r[1][1] for r in rows}))}
        for lineno, (node, cname, split) in rows:
            if node not in node_ids:
                raise GraphParseError(f"label line {lineno}: unknown entity {node!r}")
            i = node_ids[node]
            labels[i] = class_ids[cname]
            if split == "train":
                train.append(i)
            elif split == "test":
                test.append(i)
            else:
                raise GraphParseError(f"label line {lineno}: split must be train or test, got {split!r}")

    return RelGraph(
        num_nodes=n,
        num_relations=len(rel_ids),
        edges=np.array(edges, dtype=np.int64),
        node_type=node_type,
        labels=labels,
        train_ids=tuple(train),
        test_ids=tuple(test),
        node_names=tuple(node_ids),
        rel_names=tuple(rel_ids),
        type_names=tuple(type_ids),
        class_names=tuple(class_ids) if class_ids else None,
    )


def load_graph(directory: str | Path, format: str | None = None, allow_empty: bool = False) -> RelGraph:
    """Load ``edges.tsv`` (or ``edges.nt``), ``labels.tsv`` and ``types.tsv`` from a directory."""
    d = Path(directory)
    if format is None:
        format = "ntriples" if (d / "edges.nt").exists() and not (d / "edges.tsv").exists() else "tsv"
    edge_file = d / ("edges.nt" if format == "ntriples" else "edges.tsv")
    labels = d / "labels.tsv"
    types = d / "types.tsv"
    return parse_triples(
        edge_file.read_text(encoding="utf-8"),
        format=format,
        labels_text=labels.read_text(encoding="utf-8") if labels.exists() else None,
        types_text=types.read_text(encoding="utf-8") if types.exists() else None,
        allow_empty=allow_empty,
    )


def write_graph(g: RelGraph, directory: str | Path) -> None:
    """Write a graph in the TSV layout read by :func:`load_graph`."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = g.node_names or tuple(f"n{i}" for i in range(g.num_nodes))
    rels = g.rel_names or tuple(f"r{r}" for r in range(g.num_relations))
    types = g.type_names or tuple(f"t{t}" for t in range(g.num_types))
    classes = g.class_names or tuple(f"c{c}" for c in range(g.num_classes))
    with open(d / "edges.tsv", "w", encoding="utf-8") as f:
        for s, r, o in g.edges:
            f.write(f"{names[s]}\t{rels[r]}\t{names[o]}\n")
    with open(d / "types.tsv", "w", encoding="utf-8") as f:
        for i in range(g.num_nodes):
            f.write(f"{names[i]}\t{types[g.node_type[i]]}\n")
    with open(d / "labels.tsv", "w", encoding="utf-8") as f:
        for i in g.train_ids:
            f.write(f"{names[i]}\t{classes[g.labels[i]]}\ttrain\n")
        for i in g.test_ids:
            f.write(f"{names[i]}\t{classes[g.labels[i]]}\ttest\n")
