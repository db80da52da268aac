import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advmiss.graphs import (CyclicGraphError, as_adjacency, attack_success, hamming_distance,
                            threshold_graph)
from advmiss.scm import Dag, scm_two


def test_threshold():
    B = np.array([[0, 0.5, 0.2], [0, 0, -0.31], [0, 0, 0]])
    g = threshold_graph(B)
    assert g.edges == ((0, 1), (1, 2)) or set(g.edges) == {(0, 1), (1, 2)}
    with pytest.raises(CyclicGraphError):
        threshold_graph(np.array([[0, 1.0], [1.0, 0]]))
    with pytest.raises(ValueError):
        threshold_graph(np.array([[0, np.nan], [0, 0]]))


class TestHamming:
    def test_dags(self):
        t = np.array([[0, 1, 1], [0, 0, 0], [0, 0, 0]])
        assert hamming_distance(t, t) == 0
        assert hamming_distance(t, np.zeros((3, 3))) == 2
        rev = np.array([[0, 0, 1], [1, 0, 0], [0, 0, 0]])
        assert hamming_distance(t, rev) == 2  # reversal = missing + extra

    def test_cpdag_rules(self):
        t = np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]])
        und_true = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
        assert hamming_distance(t, und_true) == 0
        und_false = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        assert hamming_distance(t, und_false) == 1

    def test_dag_objects(self):
        g = scm_two().dag()
        assert hamming_distance(g, g.without_edge(1, 2)) == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            hamming_distance(np.zeros((2, 2)), np.zeros((3, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetric_difference_for_dags(self, seed):
        rng = np.random.default_rng(seed)
        d = 5
        a = np.triu(rng.random((d, d)) < 0.4, 1).astype(int)
        b = np.triu(rng.random((d, d)) < 0.4, 1).astype(int)
        assert hamming_distance(a, b) == int(np.sum(a != b))
        assert hamming_distance(a, b) >= 0


class TestSuccess:
    def test_present_absent(self):
        g = scm_two().dag()
        assert attack_success(g, (1, 2)) == 0
        assert attack_success(g.without_edge(1, 2), (1, 2)) == 1

    def test_undirected_counts_as_present(self):
        G = np.array([[0, 1], [1, 0]])
        assert attack_success(G, (0, 1)) == 0

    def test_reversed_counts_as_absent(self):
        assert attack_success(np.array([[0, 0], [1, 0]]), (0, 1)) == 1

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            attack_success(np.zeros((2, 2)), (0, 2))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_in_edge_removal(self, seed):
        rng = np.random.default_rng(seed)
        G = (rng.random((5, 5)) < 0.4).astype(int)
        np.fill_diagonal(G, 0)
        target = (0, 1)
        s = attack_success(G, target)
        H = G.copy()
        H[rng.random((5, 5)) < 0.3] = 0
        H[target] = G[target]
        assert attack_success(H, target) >= s


def test_as_adjacency():
    np.testing.assert_array_equal(as_adjacency(Dag(2, ((0, 1),))), [[0, 1], [0, 0]])
    with pytest.raises(ValueError):
        as_adjacency(np.zeros(3))
