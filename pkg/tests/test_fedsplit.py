import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedalign import synthetic
from fedalign.fedsplit import (FederatedDataset, export_split, federated_split, mean_std, shard_stats,
                               unlabeled_types)
from fedalign.relgraph import RelGraph, load_graph

from conftest import split_violations

GRAPH_200 = synthetic.generate(synthetic.SyntheticSpec(nodes=200, types=5, relations=4), seed=0)


@pytest.mark.parametrize("seed", range(20))
def test_invariants_hold_for_every_seed(seed):
    fd = federated_split(GRAPH_200, 5, 4, seed=seed)
    assert len(fd.shards) == 5
    assert split_violations(GRAPH_200, fd) == []


def test_edge_with_missing_endpoint_is_dropped():
    # node 3 is unlabeled with type 1; a seed that leaves it out must drop (0, 0, 3)
    g = RelGraph(5, 1, np.array([[0, 0, 3], [0, 0, 1], [1, 0, 2]]), np.array([0, 0, 0, 1, 1]),
                 {0: 0, 1: 1, 2: 0}, (0, 1), (2,))
    for seed in range(30):
        fd = federated_split(g, 2, 1, seed=seed)
        for sh in fd.shards:
            present = set(sh.to_global.tolist())
            glob = {(int(sh.to_global[s]), r, int(sh.to_global[d])) for s, r, d in sh.graph.edges}
            assert ((0, 0, 3) in glob) == (3 in present and 0 in present)
            assert (1, 0, 2) in glob or 1 not in present


def test_split_is_deterministic():
    a = federated_split(GRAPH_200, 4, 3, seed=7)
    b = federated_split(GRAPH_200, 4, 3, seed=7)
    for x, y in zip(a.shards, b.shards):
        np.testing.assert_array_equal(x.to_global, y.to_global)
        np.testing.assert_array_equal(x.graph.edges, y.graph.edges)
        assert x.graph.labels == y.graph.labels


def test_errors():
    with pytest.raises(ValueError, match="at least 2"):
        federated_split(GRAPH_200, 1, 2)
    with pytest.raises(ValueError, match="exceeds training-set size"):
        federated_split(GRAPH_200, len(GRAPH_200.train_ids) + 1, 2)
    with pytest.raises(ValueError, match="types_to_keep"):
        federated_split(GRAPH_200, 3, len(unlabeled_types(GRAPH_200)) + 1)


def test_shared_type_choice_uses_one_draw():
    fd = federated_split(GRAPH_200, 5, 2, seed=3, shared_type_choice=True)
    labeled = set(GRAPH_200.labels)
    kinds = []
    for sh in fd.shards:
        types = {int(GRAPH_200.node_type[i]) for i in sh.to_global.tolist() if int(i) not in labeled}
        kinds.append(types)
    union = set().union(*kinds)
    assert len(union) <= 2


def test_stats_examples():
    assert (mean_std([2, 2, 2]).mean, mean_std([2, 2, 2]).std) == (2.0, 0.0)
    assert (mean_std([0, 4]).mean, mean_std([0, 4]).std) == (2.0, 2.0)


def test_shard_stats_matches_recomputation():
    fd = federated_split(GRAPH_200, 10, 4, seed=1)
    stats = shard_stats(fd)
    ent = [sh.graph.num_nodes for sh in fd.shards]
    edg = [len(sh.graph.edges) for sh in fd.shards]
    assert stats.entities == tuple(ent) and stats.edges == tuple(edg)
    m = sum(ent) / len(ent)
    sd = (sum((x - m) ** 2 for x in ent) / len(ent)) ** 0.5
    assert abs(stats.entity_stat.mean - m) < 1e-12 and abs(stats.entity_stat.std - sd) < 1e-9
    assert "mean±std" in stats.table()


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=12))
def test_population_std(values):
    s = mean_std(values)
    assert s.std == pytest.approx(float(np.std(values)), abs=1e-9)


def test_export_split(tmp_path):
    fd = federated_split(GRAPH_200, 3, 2, seed=0)
    export_split(fd, tmp_path)
    dirs = sorted(p.name for p in tmp_path.iterdir())
    assert dirs == ["client_00", "client_01", "client_02"]
    for sh, d in zip(fd.shards, dirs):
        h = load_graph(tmp_path / d, allow_empty=True)
        assert len(h.edges) == sh.num_edges
        assert len(h.train_ids) == len(sh.train_ids) and len(h.test_ids) == len(sh.test_ids)
