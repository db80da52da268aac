"""Structure learners run by the modeler on masked data.

The EM learner alternates Gaussian-conditioning E-steps, which produce the
aggregate second-moment matrix ``T``, with a DAG-constrained least-squares
M-step solved by the augmented-Lagrangian NOTEARS scheme directly on ``T``.
Baselines are mean imputation followed by the same solver and a PC search
with Fisher-z tests.
"""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.optimize as sopt
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.datasets import make_spd_matrix

from ._validation import check_covariance, check_fitted, check_square
from .data import Dataset, MaskedDataset, mean_impute
from .graphs import CyclicGraphError, threshold_graph
from .scm import Dag, FactorizationError

logger = logging.getLogger(__name__)

INIT_SCHEMES = ("EmpDiag", "Identity", "True", "RandomSpd", "InvWishart")
LOG_2PI = math.log(2.0 * math.pi)


class NotearsConvergenceError(RuntimeError):
    """The augmented Lagrangian hit ``rho_max`` before ``h <= h_tol``.

    ``W`` holds the last iterate and ``h`` its constraint value.
    """

    def __init__(self, msg, W=None, h=None, trace=None):
        super().__init__(msg)
        self.W = W
        self.h = h
        self.trace = trace


@dataclass(frozen=True)
class SufficientStats:
    """Aggregate conditional second moments over ``n`` rows."""

    t_hat: np.ndarray
    n: int

    def __post_init__(self):
        T = check_square(self.t_hat, "t_hat")
        object.__setattr__(self, "t_hat", 0.5 * (T + T.T))


@dataclass
class FitResult:
    """Output of a structure learner.

    ``graph`` is ``None`` when the thresholded support is cyclic.  For EM
    learners ``loglik_trace[t - 1]`` is the observed-data log-likelihood of
    the ``t``-th accepted iterate and ``loglik_init`` that of the initial
    covariance.
    """

    b_hat: np.ndarray
    noise: float | np.ndarray
    sigma_hat: np.ndarray
    graph: Dag | None
    loglik_trace: list = field(default_factory=list)
    loglik_init: float | None = None
    n_iter: int = 0
    converged: bool = True
    info: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# initialization

def observed_variances(mds: MaskedDataset) -> np.ndarray:
    out = np.empty(mds.d)
    for j in range(mds.d):
        col = mds.values[mds.patterns[:, j], j]
        if col.size < 2:
            raise ValueError(f"column {mds.columns[j]!r} has fewer than 2 observed values")
        out[j] = col.var(ddof=1)
    return out


def _rescale_to(S, variances):
    s = np.sqrt(variances / np.diag(S))
    S = S * np.outer(s, s)
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, variances)
    return S


def init_covariance(scheme: str, mds: MaskedDataset, sigma_true=None, seed=None) -> np.ndarray:
    """Initial covariance for EM.

    ``EmpDiag`` and the two random schemes are matched to the observed
    column variances; ``InvWishart`` draws with ``d + 2`` degrees of freedom
    around a random SPD scale.
    """
    d = mds.d
    if scheme == "Identity":
        return np.eye(d)
    if scheme == "True":
        if sigma_true is None:
            raise ValueError("True init requires sigma_true")
        return check_covariance(sigma_true)
    v = observed_variances(mds)
    if scheme == "EmpDiag":
        return np.diag(v)
    rng = np.random.default_rng(seed)
    if scheme == "RandomSpd":
        S = make_spd_matrix(d, random_state=int(rng.integers(2**31)))
    elif scheme == "InvWishart":
        scale = make_spd_matrix(d, random_state=int(rng.integers(2**31)))
        S = np.atleast_2d(stats.invwishart(df=d + 2, scale=scale).rvs(random_state=rng))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    return _rescale_to(S, v)


# --------------------------------------------------------------------------
# E-step and likelihood

def _chol(S, what):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"{what} is not positive definite") from exc


def e_step_stats(mds: MaskedDataset, sigma) -> SufficientStats:
    """``sum_i E[x x^T | x_o]`` under ``N(0, sigma)``, grouped by pattern."""
    sigma = check_covariance(sigma)
    d = mds.d
    T = np.zeros((d, d))
    for pattern, rows in mds.pattern_groups():
        o = np.flatnonzero(pattern)
        m = np.flatnonzero(~pattern)
        if m.size == 0:
            X = mds.values[rows]
            T += X.T @ X
            continue
        if o.size == 0:
            T += rows.size * sigma
            continue
        L = _chol(sigma[np.ix_(o, o)], "observed block")
        K = sla.cho_solve((L, True), sigma[np.ix_(o, m)]).T  # Sigma_mo Sigma_oo^-1
        full = np.zeros((rows.size, d))
        Xo = mds.values[np.ix_(rows, o)]
        full[:, o] = Xo
        full[:, m] = Xo @ K.T
        T += full.T @ full
        T[np.ix_(m, m)] += rows.size * (sigma[np.ix_(m, m)] - K @ sigma[np.ix_(o, m)])
    return SufficientStats(T, mds.n)


def observed_loglik(mds: MaskedDataset, sigma) -> float:
    """Sum over rows of the zero-mean Gaussian log-density of ``x_o``."""
    sigma = check_covariance(sigma)
    total = 0.0
    for pattern, rows in mds.pattern_groups():
        o = np.flatnonzero(pattern)
        if o.size == 0:
            continue
        L = _chol(sigma[np.ix_(o, o)], "observed block")
        Z = sla.solve_triangular(L, mds.values[np.ix_(rows, o)].T, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        total -= 0.5 * (rows.size * (o.size * LOG_2PI + logdet) + np.sum(Z * Z))
    return float(total)


# --------------------------------------------------------------------------
# M-step

def acyclicity_h(W):
    """``h(W) = tr(exp(W * W)) - d`` and its gradient ``exp(W * W)^T * 2W``."""
    W = check_square(W, "W")
    # line searches can probe huge steps; an inf objective just makes them back off
    with np.errstate(over="ignore", invalid="ignore"):
        E = sla.expm(W * W)
        return float(np.trace(E) - W.shape[0]), E.T * 2.0 * W


def notears_gram(stats_: SufficientStats, l1: float = 0.1, w_threshold: float = 0.0,
                 max_iter: int = 100, h_tol: float = 1e-8, rho_max: float = 1e16,
                 on_rho_max: str = "raise") -> np.ndarray:
    """NOTEARS least squares expressed through the Gram matrix ``T``.

    Minimizes ``tr((I - W)^T T (I - W)) / (2n) + l1 |W|_1`` subject to
    ``h(W) = 0``.  ``W = W+ - W-`` is split into nonnegative halves so the
    l1 term is smooth and L-BFGS-B handles the bounds.  ``max_iter`` counts
    dual (multiplier) updates.

    If ``rho`` reaches ``rho_max`` with ``h > h_tol`` a
    :class:`NotearsConvergenceError` is raised, or with
    ``on_rho_max="return"`` the last iterate is returned (logged at INFO).
    """
    if on_rho_max not in ("raise", "return"):
        raise ValueError(f"unknown on_rho_max {on_rho_max!r}")
    T = stats_.t_hat
    n = stats_.n
    if n < 1:
        raise ValueError("sufficient statistics need n >= 1")
    d = T.shape[0]

    def adj(w):
        return (w[: d * d] - w[d * d:]).reshape(d, d)

    def objective(w, rho, alpha):
        W = adj(w)
        TW = T @ W
        loss = 0.5 / n * (np.trace(T) - 2.0 * np.trace(TW) + np.sum(W * TW))
        g_loss = (TW - T) / n
        h, g_h = acyclicity_h(W)
        obj = loss + 0.5 * rho * h * h + alpha * h + l1 * w.sum()
        g = g_loss + (rho * h + alpha) * g_h
        return obj, np.concatenate([(g + l1).ravel(), (-g + l1).ravel()])

    bounds = [(0, 0) if i == j else (0, None)
              for _ in range(2) for i in range(d) for j in range(d)]
    w_est = np.zeros(2 * d * d)
    rho, alpha, h = 1.0, 0.0, np.inf
    for _ in range(max_iter):
        w_new, h_new = w_est, h
        while rho < rho_max:
            sol = sopt.minimize(objective, w_est, args=(rho, alpha), method="L-BFGS-B",
                                jac=True, bounds=bounds)
            w_new = sol.x
            h_new, _ = acyclicity_h(adj(w_new))
            if h_new > 0.25 * h:
                rho *= 10.0
            else:
                break
        w_est, h = w_new, h_new
        alpha += rho * h
        if h <= h_tol or rho >= rho_max:
            break
    W = adj(w_est)
    np.fill_diagonal(W, 0.0)
    if h > h_tol and on_rho_max == "return":
        logger.info("NOTEARS stopped at rho_max with h=%.3g > h_tol", h)
    elif h > h_tol:
        raise NotearsConvergenceError(
            f"acyclicity constraint not met (h={h:.3g}, rho={rho:.3g})", W=W, h=h)
    W[np.abs(W) < w_threshold] = 0.0
    return W


def variance_update(stats_: SufficientStats, B, mode: str = "equal"):
    """Noise variances from the residual quadratic forms ``q_j``.

    ``q_j = T_jj - 2 B_j^T T_j + B_j^T T B_j``; equal mode returns
    ``sum(q) / (n d)`` and per-node mode ``q / n``.
    """
    T, n = stats_.t_hat, stats_.n
    B = check_square(B, "B")
    if B.shape != T.shape:
        raise ValueError("B and T shapes differ")
    M = np.eye(T.shape[0]) - B
    q = np.einsum("ij,ik,kj->j", M, T, M)
    if mode == "equal":
        est = np.array(q.sum() / (n * T.shape[0]))
    elif mode == "per_node":
        est = q / n
    else:
        raise ValueError(f"unknown variance mode {mode!r}")
    if np.any(est <= 1e-8):
        warnings.warn("non-positive noise variance estimate floored at 1e-8", RuntimeWarning)
        est = np.maximum(est, 1e-8)
    return float(est) if mode == "equal" else est


def implied_covariance(B, noise) -> np.ndarray:
    """``(I - B)^{-T} diag(noise) (I - B)^{-1}`` without a DAG check."""
    d = B.shape[0]
    A = np.linalg.solve(np.eye(d) - B, np.eye(d)).T
    S = (A * np.broadcast_to(noise, (d,))) @ A.T
    return 0.5 * (S + S.T)


def _graph_or_none(B, w_threshold, labels):
    try:
        return threshold_graph(B, w_threshold, labels)
    except CyclicGraphError:
        logger.warning("thresholded graph is cyclic; reporting no graph")
        return None


# --------------------------------------------------------------------------
# EM learner

def missdag(mds: MaskedDataset, init: str = "EmpDiag", eps: float = 1e-5,
            var_mode: str = "equal", l1: float = 0.1, w_threshold: float = 0.3,
            sigma_true=None, seed=None, max_em_iter: int = 100,
            notears_opts: dict | None = None) -> FitResult:
    """EM with a DAG-constrained M-step.

    Iterates while the observed log-likelihood gain is at least
    ``eps * |J_prev|``.  The first M-step is always accepted.  When a later
    step lowers the likelihood the loop stops and the previous iterate is
    returned, so ``loglik_trace`` never decreases; the rejected value is kept
    in ``info["rejected_loglik"]``.
    """
    opts = notears_opts or {}
    sigma = init_covariance(init, mds, sigma_true, seed)
    j_init = observed_loglik(mds, sigma)
    trace: list[float] = []
    best = None
    converged = False
    info: dict = {}
    for t in range(1, max_em_iter + 1):
        st = e_step_stats(mds, sigma)
        try:
            B = notears_gram(st, l1=l1, w_threshold=0.0, **opts)
        except NotearsConvergenceError as exc:
            exc.trace = list(trace)
            raise
        noise = variance_update(st, B, var_mode)
        sigma_new = implied_covariance(B, noise)
        j_new = observed_loglik(mds, sigma_new)
        if best is not None:
            gain = j_new - trace[-1]
            if gain < eps * abs(trace[-1]):
                converged = True
                if gain < 0:
                    info["rejected_loglik"] = j_new
                    break
                best = (B, noise, sigma_new)
                trace.append(j_new)
                break
        best = (B, noise, sigma_new)
        trace.append(j_new)
        sigma = sigma_new
    B, noise, sigma = best
    if not converged:
        logger.info("EM stopped at the %d-iteration cap", max_em_iter)
    return FitResult(B, noise, sigma, _graph_or_none(B, w_threshold, mds.columns),
                     trace, j_init, len(trace), converged, info)


def notears_fit(X, l1: float = 0.1, w_threshold: float = 0.3, var_mode="equal",
                columns=None, notears_opts: dict | None = None) -> FitResult:
    """NOTEARS on a complete data matrix."""
    X = np.asarray(X, dtype=float)
    st = SufficientStats(X.T @ X, X.shape[0])
    B = notears_gram(st, l1=l1, w_threshold=0.0, **(notears_opts or {}))
    noise = variance_update(st, B, var_mode)
    return FitResult(B, noise, implied_covariance(B, noise),
                     _graph_or_none(B, w_threshold, columns))


def mean_impute_notears(mds: MaskedDataset, l1: float = 0.1, w_threshold: float = 0.3,
                        var_mode="equal", notears_opts: dict | None = None) -> FitResult:
    """Mean imputation followed by one NOTEARS fit."""
    ds = mean_impute(mds)
    return notears_fit(ds.values, l1, w_threshold, var_mode, mds.columns, notears_opts)


# --------------------------------------------------------------------------
# PC with Fisher-z tests

def _fisher_z_pvalue(X, i, j, S):
    idx = [i, j, *S]
    C = np.corrcoef(X[:, idx], rowvar=False)
    try:
        P = np.linalg.inv(C)
    except np.linalg.LinAlgError:
        P = np.linalg.pinv(C)
    r = -P[0, 1] / math.sqrt(P[0, 0] * P[1, 1])
    r = min(max(r, -1 + 1e-12), 1 - 1e-12)
    z = 0.5 * math.log((1 + r) / (1 - r)) * math.sqrt(X.shape[0] - len(S) - 3)
    return 2.0 * stats.norm.sf(abs(z))


def _meek(G):
    d = G.shape[0]

    def und(a, b):
        return G[a, b] and G[b, a]

    def dirs(a, b):
        return G[a, b] and not G[b, a]

    def adjc(a, b):
        return G[a, b] or G[b, a]

    changed = True
    while changed:
        changed = False
        for a, b in itertools.permutations(range(d), 2):
            if not und(a, b):
                continue
            orient = False
            # R1: c -> a - b, c and b nonadjacent
            if any(dirs(c, a) and not adjc(c, b) for c in range(d) if c not in (a, b)):
                orient = True
            # R2: a -> c -> b
            elif any(dirs(a, c) and dirs(c, b) for c in range(d) if c not in (a, b)):
                orient = True
            else:
                others = [c for c in range(d) if c not in (a, b)]
                # R3: a - c -> b, a - e -> b, c and e nonadjacent
                for c, e in itertools.combinations(others, 2):
                    if und(a, c) and und(a, e) and dirs(c, b) and dirs(e, b) and not adjc(c, e):
                        orient = True
                        break
                # R4: a - c -> e -> b, a adjacent to e, c and b nonadjacent
                if not orient:
                    for c, e in itertools.permutations(others, 2):
                        if und(a, c) and dirs(c, e) and dirs(e, b) and adjc(a, e) \
                                and not adjc(c, b):
                            orient = True
                            break
            if orient:
                G[b, a] = 0
                changed = True
    return G


def pc_fisherz(data, alpha: float = 0.01, deletion: str = "complete") -> np.ndarray:
    """Order-independent (stable) PC returning a CPDAG adjacency matrix.

    ``data`` may be a :class:`Dataset`, a :class:`MaskedDataset` or an array
    with NaN for missing values.  ``complete`` deletion keeps only fully
    observed rows; ``testwise`` uses, per test, the rows observed on the
    variables involved.  Tests without enough rows are skipped, logged and
    treated as dependence.  V-structure conflicts stay undirected.
    """
    if isinstance(data, MaskedDataset):
        X = data.to_nan()
    elif isinstance(data, Dataset):
        X = np.asarray(data.values, dtype=float)
    else:
        X = np.asarray(data, dtype=float)
    n, d = X.shape
    obs = ~np.isnan(X)
    if deletion == "complete":
        keep = obs.all(axis=1)
        X, obs = X[keep], obs[keep]
    elif deletion != "testwise":
        raise ValueError(f"unknown deletion mode {deletion!r}")

    def independent(i, j, S):
        rows = obs[:, [i, j, *S]].all(axis=1)
        m = int(rows.sum())
        if m - len(S) - 3 <= 0:
            logger.info("skipping test %d _||_ %d | %s: %d usable rows", i, j, S, m)
            return False
        return _fisher_z_pvalue(X[rows], i, j, S) > alpha

    A = np.ones((d, d), dtype=bool)
    np.fill_diagonal(A, False)
    sepset: dict = {}
    level = 0
    while True:
        snapshot = A.copy()
        if all(snapshot[i].sum() - 1 < level for i in range(d)):
            break
        for i, j in itertools.permutations(range(d), 2):
            if not A[i, j]:
                continue
            nbrs = [k for k in np.flatnonzero(snapshot[i]) if k != j]
            if len(nbrs) < level:
                continue
            for S in itertools.combinations(nbrs, level):
                if independent(i, j, list(S)):
                    A[i, j] = A[j, i] = False
                    sepset[(i, j)] = sepset[(j, i)] = set(S)
                    break
        level += 1

    G = A.astype(int)
    proposed = set()
    for k in range(d):
        nb = np.flatnonzero(A[k])
        for i, j in itertools.combinations(nb, 2):
            if not A[i, j] and k not in sepset.get((i, j), set()):
                proposed.add((i, k))
                proposed.add((j, k))
    for a, b in proposed:
        if (b, a) not in proposed:
            G[b, a] = 0
    return _meek(G)


# --------------------------------------------------------------------------
# estimator wrappers

class MissDAG(BaseEstimator):
    """Estimator wrapper around :func:`missdag`.

    Examples
    --------
    >>> est = MissDAG(init="EmpDiag").fit(masked)        # doctest: +SKIP
    >>> est.graph_.edges                                  # doctest: +SKIP
    """

    def __init__(self, init="EmpDiag", eps=1e-5, var_mode="equal", l1=0.1, w_threshold=0.3,
                 sigma_true=None, seed=None, max_em_iter=100):
        self.init = init
        self.eps = eps
        self.var_mode = var_mode
        self.l1 = l1
        self.w_threshold = w_threshold
        self.sigma_true = sigma_true
        self.seed = seed
        self.max_em_iter = max_em_iter

    def fit(self, mds: MaskedDataset, y=None):
        self.result_ = missdag(mds, self.init, self.eps, self.var_mode, self.l1,
                               self.w_threshold, self.sigma_true, self.seed, self.max_em_iter)
        self.B_ = self.result_.b_hat
        self.graph_ = self.result_.graph
        return self

    def predict(self, X=None):
        """Thresholded adjacency matrix of the fitted graph."""
        check_fitted(self, "result_")
        return (np.abs(self.B_) > self.w_threshold).astype(int)


class MeanImputeNotears(BaseEstimator):
    def __init__(self, l1=0.1, w_threshold=0.3, var_mode="equal"):
        self.l1 = l1
        self.w_threshold = w_threshold
        self.var_mode = var_mode

    def fit(self, mds: MaskedDataset, y=None):
        self.result_ = mean_impute_notears(mds, self.l1, self.w_threshold, self.var_mode)
        self.B_ = self.result_.b_hat
        self.graph_ = self.result_.graph
        return self

    def predict(self, X=None):
        check_fitted(self, "result_")
        return (np.abs(self.B_) > self.w_threshold).astype(int)


class PC(BaseEstimator):
    def __init__(self, alpha=0.01, deletion="complete"):
        self.alpha = alpha
        self.deletion = deletion

    def fit(self, data, y=None):
        self.cpdag_ = pc_fisherz(data, self.alpha, self.deletion)
        return self

    def predict(self, X=None):
        check_fitted(self, "cpdag_")
        return self.cpdag_
