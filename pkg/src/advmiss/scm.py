"""Linear Gaussian structural causal models.

The generative model is ``X = B^T X + n`` with ``n ~ N(0, diag(noise_vars))``;
entry ``B[i, j]`` is the weight of the edge ``i -> j``.  All distributions are
zero-mean.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._validation import check_covariance, check_square


class FactorizationError(np.linalg.LinAlgError):
    """A covariance block that should be positive definite is not."""


@dataclass(frozen=True)
class Dag:
    """Directed acyclic graph on ``d`` nodes given as parent -> child pairs."""

    d: int
    edges: tuple[tuple[int, int], ...]
    node_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        edges = tuple((int(p), int(c)) for p, c in self.edges)
        object.__setattr__(self, "edges", edges)
        if len(set(edges)) != len(edges):
            raise ValueError("duplicate edges")
        for p, c in edges:
            if p == c:
                raise ValueError(f"self-loop on node {p}")
            if not (0 <= p < self.d and 0 <= c < self.d):
                raise ValueError(f"edge ({p}, {c}) out of range for d={self.d}")
        if self.node_labels is not None and len(self.node_labels) != self.d:
            raise ValueError("node_labels must have length d")
        if not is_dag(self.adjacency()):
            raise ValueError("graph contains a cycle")

    @classmethod
    def from_matrix(cls, W, tol: float = 0.0, node_labels=None) -> "Dag":
        W = check_square(W)
        rows, cols = np.nonzero(np.abs(W) > tol)
        return cls(W.shape[0], tuple(zip(rows.tolist(), cols.tolist())),
                   None if node_labels is None else tuple(node_labels))

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.d, self.d), dtype=bool)
        for p, c in self.edges:
            A[p, c] = True
        return A

    def parents(self, j: int) -> list[int]:
        return sorted(p for p, c in self.edges if c == j)

    def without_edge(self, parent: int, child: int) -> "Dag":
        if (parent, child) not in self.edges:
            raise KeyError(f"edge ({parent}, {child}) not in graph")
        return Dag(self.d, tuple(e for e in self.edges if e != (parent, child)),
                   self.node_labels)

    def topological_order(self) -> list[int]:
        return topological_order(self.adjacency())


def topological_order(A) -> list[int]:
    """Kahn's algorithm on the nonzero support of ``A``; raises on cycles."""
    A = np.asarray(A) != 0
    d = A.shape[0]
    indeg = A.sum(axis=0).astype(int)
    ready = [j for j in range(d) if indeg[j] == 0]
    order = []
    while ready:
        j = ready.pop(0)
        order.append(j)
        for c in np.flatnonzero(A[j]):
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(int(c))
    if len(order) != d:
        raise ValueError("graph contains a cycle")
    return order


def is_dag(B, tol: float = 0.0) -> bool:
    """True iff the support ``|B| > tol`` admits a topological order."""
    B = check_square(B)
    try:
        topological_order(np.abs(B) > tol)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class GaussianScm:
    """Zero-mean linear Gaussian SCM ``X = B^T X + n``."""

    B: np.ndarray
    noise_vars: np.ndarray
    columns: tuple[str, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        B = check_square(self.B).copy()
        noise = np.asarray(self.noise_vars, dtype=float).reshape(-1).copy()
        if noise.shape[0] != B.shape[0]:
            raise ValueError("noise_vars length must match B")
        if np.any(noise <= 0) or not np.all(np.isfinite(noise)):
            raise ValueError("noise variances must be positive and finite")
        if not is_dag(B):
            raise ValueError("support of B is cyclic")
        B.setflags(write=False)
        noise.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "noise_vars", noise)

    @property
    def d(self) -> int:
        return self.B.shape[0]

    def dag(self) -> Dag:
        return Dag.from_matrix(self.B, node_labels=self.columns)

    def covariance(self) -> np.ndarray:
        return covariance_of(self)


@dataclass(frozen=True)
class ConditionalGaussian:
    """Law of ``X_target`` given ``X_given``: mean ``weights @ x_given``."""

    target: int
    given: tuple[int, ...]
    weights: np.ndarray
    variance: float


def covariance_of(scm: GaussianScm) -> np.ndarray:
    """Covariance ``(I - B)^{-T} D (I - B)^{-1}`` of the SCM."""
    d = scm.d
    A = np.linalg.solve(np.eye(d) - scm.B, np.eye(d)).T  # (I - B)^{-T}
    S = (A * scm.noise_vars) @ A.T
    S = 0.5 * (S + S.T)
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("induced covariance is not positive definite") from exc
    return S


def sample(scm: GaussianScm, n: int, seed=None) -> np.ndarray:
    """Draw ``n`` rows by forward simulation in topological order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, scm.d)) * np.sqrt(scm.noise_vars)
    X = np.zeros((n, scm.d))
    for j in topological_order(scm.B):
        pa = np.flatnonzero(scm.B[:, j])
        X[:, j] = X[:, pa] @ scm.B[pa, j] + noise[:, j]
    return X


def _cholesky(S, what="covariance"):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"{what} is not positive definite") from exc


def gaussian_kl(sigma1, sigma2, mean1=None, mean2=None) -> float:
    """``KL(N(mean1, sigma1) || N(mean2, sigma2))``; means default to zero."""
    S1 = check_covariance(sigma1)
    S2 = check_covariance(sigma2)
    if S1.shape != S2.shape:
        raise ValueError(f"dimension mismatch: {S1.shape} vs {S2.shape}")
    d = S1.shape[0]
    L1 = _cholesky(S1)
    L2 = _cholesky(S2)
    # tr(S2^{-1} S1) = ||L2^{-1} L1||_F^2
    M = np.linalg.solve(L2, L1)
    trace = float(np.sum(M * M))
    logdet = 2.0 * (np.sum(np.log(np.diag(L2))) - np.sum(np.log(np.diag(L1))))
    quad = 0.0
    if mean1 is not None or mean2 is not None:
        dm = np.zeros(d) if mean2 is None else np.asarray(mean2, float)
        if mean1 is not None:
            dm = dm - np.asarray(mean1, float)
        z = np.linalg.solve(L2, dm)
        quad = float(z @ z)
    return float(max(0.5 * (trace + quad - d + logdet), 0.0))


def conditional_gaussian(sigma, j: int, S: Sequence[int]) -> ConditionalGaussian:
    """Gaussian conditional of node ``j`` on the index set ``S``."""
    sigma = check_covariance(sigma)
    S = tuple(int(s) for s in S)
    if j in S:
        raise ValueError("target must not be in the conditioning set")
    if not S:
        return ConditionalGaussian(j, (), np.zeros(0), float(sigma[j, j]))
    idx = list(S)
    L = _cholesky(sigma[np.ix_(idx, idx)], "conditioning block")
    cross = sigma[idx, j]
    z = np.linalg.solve(L, cross)
    weights = np.linalg.solve(L.T, z)
    variance = float(sigma[j, j] - z @ z)
    if variance <= 0:
        raise FactorizationError("conditional variance is not positive")
    return ConditionalGaussian(j, S, weights, variance)


def factorized_kl(scm_p: GaussianScm, scm_q: GaussianScm, g: Dag) -> float:
    """KL between two SCMs Markov to ``g``, summed node by node.

    Each term is the expected KL between the Gaussian conditionals of
    ``X_j`` given its parents in ``g``, with the expectation over the parents
    drawn from ``scm_p``.  Both SCMs must have their support inside ``g``.
    """
    if scm_p.d != g.d or scm_q.d != g.d:
        raise ValueError("dimension mismatch between SCMs and graph")
    A = g.adjacency()
    for name, scm in (("scm_p", scm_p), ("scm_q", scm_q)):
        if np.any((scm.B != 0) & ~A):
            raise ValueError(f"{name} has edges outside the graph")
    sigma_p = covariance_of(scm_p)
    total = 0.0
    for j in range(g.d):
        pa = g.parents(j)
        vp, vq = scm_p.noise_vars[j], scm_q.noise_vars[j]
        delta = scm_p.B[pa, j] - scm_q.B[pa, j]
        mean_sq = float(delta @ sigma_p[np.ix_(pa, pa)] @ delta) if pa else 0.0
        total += 0.5 * (vp / vq + mean_sq / vq - 1.0 + np.log(vq / vp))
    return total


def as_covariance(obj) -> np.ndarray:
    """Accept a GaussianScm or a covariance matrix."""
    if isinstance(obj, GaussianScm):
        return covariance_of(obj)
    return check_covariance(obj)


def scm_one() -> GaussianScm:
    """Three-node SCM with edges 1->2 (-0.9) and 1->3 (-0.8), unit noise."""
    B = np.array([[0.0, -0.9, -0.8], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    return GaussianScm(B, np.ones(3), ("X1", "X2", "X3"))


def scm_two() -> GaussianScm:
    """Six-node SCM with six edges including a weak 2->3 edge (0.4), unit noise."""
    B = np.zeros((6, 6))
    B[0, 1], B[0, 3] = -0.54, 1.15
    B[1, 2] = 0.4
    B[2, 3], B[2, 4], B[2, 5] = -1.43, -0.9, 1.29
    return GaussianScm(B, np.ones(6), tuple(f"X{i}" for i in range(1, 7)))
