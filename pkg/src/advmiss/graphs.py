"""Graph comparison helpers.

Graphs are handled as 0/1 adjacency matrices ``G``: ``G[i, j] = 1`` and
``G[j, i] = 0`` is a directed edge ``i -> j``; ``G[i, j] = G[j, i] = 1`` is an
undirected CPDAG edge.  A :class:`~advmiss.scm.Dag` is accepted anywhere a
matrix is.
"""
from __future__ import annotations

import numpy as np

from .scm import Dag, topological_order


class CyclicGraphError(ValueError):
    """Thresholded weights do not form a DAG."""


def as_adjacency(g) -> np.ndarray:
    if isinstance(g, Dag):
        return g.adjacency().astype(int)
    G = np.asarray(g)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"adjacency must be square, got {G.shape}")
    return (G != 0).astype(int)


def threshold_graph(B, w_threshold: float = 0.3, node_labels=None) -> Dag:
    """DAG of the entries with ``|B_ij| > w_threshold``; raises if cyclic."""
    B = np.asarray(B, dtype=float)
    if not np.all(np.isfinite(B)):
        raise ValueError("weight matrix has non-finite entries")
    A = np.abs(B) > w_threshold
    np.fill_diagonal(A, False)
    try:
        topological_order(A)
    except ValueError:
        raise CyclicGraphError("thresholded support is cyclic") from None
    return Dag.from_matrix(A.astype(float), node_labels=node_labels)


def hamming_distance(g_true, g_hat) -> int:
    """Edge differences between a reference DAG and a DAG or CPDAG.

    A true edge ``i -> j`` is present if ``g_hat`` has it directed the same
    way or undirected.  Every directed edge of ``g_hat`` that is not a true
    edge and every undirected pair with no true edge between its ends counts
    once.  For two DAGs this is the size of the symmetric difference.
    """
    T = as_adjacency(g_true)
    H = as_adjacency(g_hat)
    if T.shape != H.shape:
        raise ValueError(f"node sets differ: {T.shape[0]} vs {H.shape[0]}")
    undirected = (H == 1) & (H.T == 1)
    directed = (H == 1) & (H.T == 0)
    missing = np.sum((T == 1) & (H == 0))
    extra_directed = np.sum(directed & (T == 0))
    true_pair = (T == 1) | (T.T == 1)
    extra_undirected = np.sum(np.triu(undirected & ~true_pair, 1))
    return int(missing + extra_directed + extra_undirected)


def attack_success(g_hat, target_edge) -> int:
    """1 iff ``g_hat`` contains the target edge neither directed nor undirected."""
    H = as_adjacency(g_hat)
    p, c = target_edge
    d = H.shape[0]
    if not (0 <= p < d and 0 <= c < d):
        raise ValueError(f"target edge {target_edge} out of range for d={d}")
    return int(H[p, c] == 0)
