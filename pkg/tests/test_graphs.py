import numpy as np
import pytest

from fgnn.errors import MissingNodeError
from fgnn.graphs import (
    BCSGraph,
    GlobalGraph,
    build_global_graph,
    build_session_graph,
    sample_bcs,
)


class TestSessionGraph:
    def test_path_with_revisit(self):
        g = build_session_graph([0, 1, 2, 1, 3])
        expected = {
            (0, 1): 1, (1, 2): 1, (2, 1): 1, (1, 3): 1,
            (0, 0): 1, (1, 1): 1, (2, 2): 1, (3, 3): 1,
        }
        assert g.edges == expected
        assert g.nodes == [0, 1, 2, 3]

    def test_repeated_pair_counts(self):
        g = build_session_graph([0, 1, 0, 1])
        assert g.edges[(0, 1)] == 2
        assert g.edges[(1, 0)] == 1
        assert g.edges[(0, 0)] == 1 and g.edges[(1, 1)] == 1

    def test_single_item_session(self):
        g = build_session_graph([4])
        assert g.nodes == [4]
        assert g.edges == {(4, 4): 1}

    def test_explicit_self_repeat_keeps_count(self):
        g = build_session_graph([2, 2, 2])
        assert g.edges[(2, 2)] == 2


class TestGlobalGraph:
    def test_weights_add_across_sessions(self):
        g = build_global_graph([[0, 1], [0, 1]])
        assert g.edges[(0, 1)] == 2

    def test_disjoint_sessions_stay_disjoint(self):
        g = build_global_graph([[0, 1], [2, 3]])
        cross = [e for e in g.edges if (e[0] < 2) != (e[1] < 2)]
        assert cross == []
        assert g.n_nodes == 4

    def test_merge_hand_trace(self):
        g = build_global_graph([[0, 1, 2], [1, 2, 3]])
        assert g.edges[(1, 2)] == 2
        assert g.edges[(0, 1)] == 1
        assert g.edges[(2, 3)] == 1

    def test_injected_self_loops_do_not_add_up(self):
        # neither session repeats an item, so self-loops stay at 1
        g = build_global_graph([[0, 1], [0, 1], [0, 1]])
        assert g.edges[(0, 0)] == 1

    def test_single_session_global_equals_session_graph(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            items = rng.integers(0, 6, size=rng.integers(1, 12)).tolist()
            sg = build_session_graph(items)
            gg = build_global_graph([items])
            assert gg.edges == sg.edges
            assert set(sg.nodes) == {u for u, _ in gg.edges}

    def test_save_load_roundtrip(self, tmp_path):
        g = build_global_graph([[0, 1, 2], [1, 2, 3], [3, 0]])
        path = tmp_path / "graph.json"
        g.save(path)
        loaded = GlobalGraph.load(path)
        assert loaded.edges == g.edges
        assert loaded.n_nodes == g.n_nodes


def weighted_pair_graph():
    """Node 10 with out-neighbours 11 (weight 3) and 12 (weight 1)."""
    edges = {(10, 11): 3, (10, 12): 1, (10, 10): 1, (11, 11): 1, (12, 12): 1}
    return GlobalGraph(edges, n_nodes=3)


class TestBCSSampling:
    def test_hop_zero_nodes_equal_session_items(self):
        g = build_global_graph([[0, 1, 2], [2, 3]])
        bcs = sample_bcs(g, [1, 2, 1], n_hops=0, rng_seed=9)
        assert bcs.nodes == [1, 2]
        assert bcs.core == [1, 2]
        assert bcs.core_mask.tolist() == [True, True]

    def test_hop_zero_edges_are_induced_global_edges(self):
        # other sessions contribute both extra edges and extra weight
        g = build_global_graph([[0, 1], [1, 0], [0, 1]])
        bcs = sample_bcs(g, [0, 1], n_hops=0, rng_seed=1)
        triplets = {
            (int(s), int(d)): float(w)
            for s, d, w in zip(bcs.edge_src, bcs.edge_dst, bcs.edge_weight)
        }
        assert triplets[(0, 1)] == 2.0
        assert triplets[(1, 0)] == 1.0

    def test_unknown_item_raises(self):
        g = build_global_graph([[0, 1]])
        with pytest.raises(MissingNodeError):
            sample_bcs(g, [0, 99], n_hops=0)

    def test_cap_not_binding_includes_all_neighbours(self):
        g = weighted_pair_graph()
        bcs = sample_bcs(g, [10], n_hops=1, sample_cap=5, rng_seed=0)
        assert set(bcs.nodes) == {10, 11, 12}

    def test_same_seed_byte_identical(self):
        g = build_global_graph([[0, 1, 2, 3], [3, 4, 5], [5, 0], [2, 4]])
        a = sample_bcs(g, [0, 3], n_hops=2, sample_cap=2, rng_seed=123)
        b = sample_bcs(g, [0, 3], n_hops=2, sample_cap=2, rng_seed=123)
        assert a.nodes == b.nodes
        np.testing.assert_array_equal(a.edge_src, b.edge_src)
        np.testing.assert_array_equal(a.edge_dst, b.edge_dst)
        np.testing.assert_array_equal(a.edge_weight, b.edge_weight)

    def test_nested_hops_are_monotone(self):
        rng = np.random.default_rng(5)
        sessions = [rng.integers(0, 30, size=rng.integers(2, 8)).tolist() for _ in range(40)]
        g = build_global_graph(sessions)
        for seed in range(20):
            session = sessions[int(rng.integers(len(sessions)))]
            node_sets = []
            for hops in range(4):
                bcs = sample_bcs(g, session, n_hops=hops, sample_cap=2, rng_seed=seed)
                node_sets.append(set(bcs.nodes))
            for small, big in zip(node_sets[:-1], node_sets[1:]):
                assert small <= big

    def test_retained_weights_match_global(self):
        rng = np.random.default_rng(6)
        sessions = [rng.integers(0, 15, size=rng.integers(2, 6)).tolist() for _ in range(25)]
        g = build_global_graph(sessions)
        bcs = sample_bcs(g, sessions[0], n_hops=2, sample_cap=3, rng_seed=4)
        for s, d, w in zip(bcs.edge_src, bcs.edge_dst, bcs.edge_weight):
            assert g.edges[(int(s), int(d))] == w

    def test_weighted_sampling_frequency(self):
        g = weighted_pair_graph()
        hits = 0
        draws = 10_000
        for seed in range(draws):
            bcs = sample_bcs(g, [10], n_hops=1, sample_cap=1, rng_seed=seed)
            sampled = set(bcs.nodes) - {10}
            assert len(sampled) == 1
            if 11 in sampled:
                hits += 1
        assert hits / draws == pytest.approx(0.75, abs=0.02)
