import numpy as np
import pytest

from fedalign.fedsplit import ClientShard
from fedalign.relgraph import RelGraph, build_neighbor_index


def tiny_graph() -> RelGraph:
    """6 nodes, 2 relations, labels on 4 nodes (3 train, 1 test)."""
    edges = [(0, 0, 1), (1, 0, 2), (2, 1, 3), (3, 0, 0), (4, 1, 1), (5, 0, 4), (1, 1, 5), (2, 0, 5)]
    return RelGraph(6, 2, np.array(edges), np.zeros(6, dtype=np.int64), {0: 0, 1: 1, 2: 2, 3: 0}, (0, 1, 2), (3,))


@pytest.fixture
def tiny():
    g = tiny_graph()
    return g, ClientShard(g, np.arange(g.num_nodes)), build_neighbor_index(g)


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def split_violations(g, fd) -> list[str]:
    """Every broken split invariant: train disjointness and coverage, edge closure, test duplication."""
    out = []
    seen: set[int] = set()
    full = {tuple(e) for e in g.edges.tolist()}
    for k, sh in enumerate(fd.shards):
        tg = sh.to_global
        train = {int(tg[i]) for i in sh.train_ids}
        if train & seen:
            out.append(f"shard {k}: train ids shared with another shard")
        seen |= train
        if {int(tg[i]) for i in sh.test_ids} != set(g.test_ids):
            out.append(f"shard {k}: test set differs from the global test set")
        for i in list(sh.train_ids) + list(sh.test_ids):
            if sh.graph.labels[i] != g.labels[int(tg[i])]:
                out.append(f"shard {k}: label of local node {i} differs from the source")
        present = set(tg.tolist())
        local = {(int(tg[s]), int(r), int(tg[d])) for s, r, d in sh.graph.edges}
        if not local <= full:
            out.append(f"shard {k}: edge not in the source graph")
        closed = {e for e in full if e[0] in present and e[2] in present}
        if local != closed:
            out.append(f"shard {k}: {len(closed - local)} closed edges missing")
    if seen != set(g.train_ids):
        out.append("union of shard train sets differs from the training set")
    sizes = [len(s.train_ids) for s in fd.shards]
    if max(sizes) - min(sizes) > 1:
        out.append(f"train slices are unbalanced: {sizes}")
    return out


ACCEPTANCE: list[str] = []


def verdict(label: str, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if the criterion failed."""
    line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
