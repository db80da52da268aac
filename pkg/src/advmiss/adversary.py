"""Adversarial SCM construction and rejection-sampling missingness mechanisms.

Every mechanism exposes the same small surface:

``support``
    boolean array ``(k, d)``; row ``r`` is an observation pattern
    (``True`` = observed).  Rows are ordered by the integer value of the
    pattern restricted to the masked set, least significant bit first.
``pattern_probs(X)``
    ``(n, k)`` probabilities of each supported pattern given each row.
``sample_patterns(X, seed)``
    one pattern per row drawn from ``pattern_probs``.
"""
from __future__ import annotations

import logging
import math
import warnings

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_covariance, check_data, check_fitted, check_index_set
from .scm import Dag, FactorizationError, GaussianScm, as_covariance, covariance_of, sample

logger = logging.getLogger(__name__)

MAX_LOCAL_SUPPORT_BITS = 20
MAX_GENERALIZED_DIM = 12


class CapabilityError(TypeError):
    """The requested computation is not available for this mechanism."""


# --------------------------------------------------------------------------
# adversarial SCMs

def optimal_adversarial_scm(sigma_p, g_alpha: Dag) -> GaussianScm:
    """KL-closest linear Gaussian SCM Markov to ``g_alpha``.

    Each node is regressed on its ``g_alpha`` parents under ``sigma_p``: the
    column of ``B`` holds the regression coefficients and the noise variance
    is the residual (Schur complement) variance.  Optimality assumes
    ``g_alpha`` is a subgraph of the true graph.
    """
    sigma_p = check_covariance(sigma_p)
    d = sigma_p.shape[0]
    if g_alpha.d != d:
        raise ValueError("graph and covariance dimensions differ")
    B = np.zeros((d, d))
    noise = np.empty(d)
    for j in range(d):
        pa = g_alpha.parents(j)
        if not pa:
            noise[j] = sigma_p[j, j]
            continue
        block = sigma_p[np.ix_(pa, pa)]
        try:
            L = np.linalg.cholesky(block)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"parent block of node {j} is singular") from exc
        z = np.linalg.solve(L, sigma_p[pa, j])
        B[pa, j] = np.linalg.solve(L.T, z)
        noise[j] = sigma_p[j, j] - z @ z
    return GaussianScm(B, noise, g_alpha.node_labels)


def delete_edge(scm: GaussianScm, parent: int, child: int, weight: float = 0.0,
                child_noise: float | None = None) -> GaussianScm:
    """Copy of ``scm`` with one edge weight overwritten.

    Unlike :func:`optimal_adversarial_scm` the other structural equations
    and, unless ``child_noise`` is given, the child's noise are left as is.
    """
    if scm.B[parent, child] == 0:
        raise KeyError(f"edge ({parent}, {child}) not in the SCM")
    B = np.array(scm.B)
    B[parent, child] = weight
    noise = np.array(scm.noise_vars)
    if child_noise is not None:
        noise[child] = child_noise
    return GaussianScm(B, noise, scm.columns)


def zero_covariance(sigma, pairs) -> np.ndarray:
    """Set the listed off-diagonal covariance entries to zero.

    Raises if the result is no longer positive definite.
    """
    S = np.array(check_covariance(sigma))
    for i, j in pairs:
        S[i, j] = S[j, i] = 0.0
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("zeroed covariance is not positive definite") from exc
    return S


# --------------------------------------------------------------------------
# density ratios

def _log_normal_parts(S):
    L = np.linalg.cholesky(S)
    return L, 2.0 * np.sum(np.log(np.diag(L)))


def log_density_ratio(x, sigma_p, sigma_alpha) -> np.ndarray:
    """``log N(x; 0, sigma_alpha) - log N(x; 0, sigma_p)`` row-wise."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    Lp, ldp = _log_normal_parts(sigma_p)
    La, lda = _log_normal_parts(sigma_alpha)
    zp = np.linalg.solve(Lp, x.T)
    za = np.linalg.solve(La, x.T)
    return -0.5 * (lda - ldp) - 0.5 * (np.sum(za * za, axis=0) - np.sum(zp * zp, axis=0))


def density_ratio(x, sigma_p, sigma_alpha) -> np.ndarray:
    """Adversarial-to-true density ratio of zero-mean Gaussian marginals."""
    return np.exp(log_density_ratio(x, sigma_p, sigma_alpha))


def analytic_lambda(sigma_p, sigma_alpha) -> float:
    """Supremum of the density ratio, or ``inf`` when it is unbounded.

    The exponent is ``-x^T (Sa^-1 - Sp^-1) x / 2``, so the ratio is bounded
    iff that difference is positive semidefinite, in which case the maximum
    sits at ``x = 0``.
    """
    Pa = np.linalg.inv(sigma_alpha)
    Pp = np.linalg.inv(sigma_p)
    eig = np.linalg.eigvalsh(0.5 * ((Pa - Pp) + (Pa - Pp).T))
    scale = max(1.0, float(np.max(np.abs(eig))))
    if eig[0] < -1e-12 * scale:
        return math.inf
    return float(np.sqrt(np.linalg.det(sigma_p) / np.linalg.det(sigma_alpha)))


def lambda_max(scm_p, scm_alpha, V, method="analytic", calibration=None) -> float:
    """Maximum density ratio on the coordinates ``V``.

    ``method="analytic"`` returns ``math.inf`` for unbounded ratios;
    ``method="empirical"`` takes the maximum over the calibration rows.
    """
    Sp = as_covariance(scm_p)
    Sa = as_covariance(scm_alpha)
    V = check_index_set(V, Sp.shape[0], "V")
    Sp_V, Sa_V = Sp[np.ix_(V, V)], Sa[np.ix_(V, V)]
    if method == "analytic":
        return analytic_lambda(Sp_V, Sa_V)
    if method == "empirical":
        if calibration is None:
            raise ValueError("empirical lambda requires calibration samples")
        X = check_data(calibration, Sp.shape[0])
        return float(np.exp(np.max(log_density_ratio(X[:, V], Sp_V, Sa_V))))
    raise ValueError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# mechanisms

def patterns_for_subset(V, d) -> np.ndarray:
    """All ``2**|V|`` patterns that observe the complement of ``V``.

    Row ``k`` observes ``V[b]`` iff bit ``b`` of ``k`` is set.
    """
    V = list(V)
    k = np.arange(2 ** len(V))
    support = np.ones((k.size, d), dtype=bool)
    for b, j in enumerate(V):
        support[:, j] = (k >> b) & 1
    return support


def draw_patterns(probs, seed=None) -> np.ndarray:
    """Inverse-CDF draw of one column index per row of ``probs``."""
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


class MissingnessMechanism(BaseEstimator):
    """Shared sampling and rate helpers."""

    def pattern_probs(self, X) -> np.ndarray:
        raise NotImplementedError

    @property
    def n_features(self) -> int:
        return self.support.shape[1]

    def sample_pattern_index(self, X, seed=None) -> np.ndarray:
        return draw_patterns(self.pattern_probs(X), seed)

    def sample_patterns(self, X, seed=None) -> np.ndarray:
        return self.support[self.sample_pattern_index(X, seed)]

    def missing_counts(self) -> np.ndarray:
        return (~self.support).sum(axis=1)

    def expected_rate_per_row(self, X) -> np.ndarray:
        return self.pattern_probs(X) @ self.missing_counts() / self.n_features


class McarMechanism(MissingnessMechanism):
    """Patterns drawn independently of the data."""

    def __init__(self, support, probs):
        self.support = support
        self.probs = probs

    def fit(self, X=None, y=None):
        return self

    def pattern_probs(self, X) -> np.ndarray:
        p = np.asarray(self.probs, dtype=float)
        if abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
            raise ValueError("MCAR probabilities must be a distribution")
        n = np.atleast_2d(X).shape[0]
        return np.broadcast_to(p, (n, p.size)).copy()


def always_observed(d) -> McarMechanism:
    return McarMechanism(np.ones((1, d), dtype=bool), np.array([1.0]))


class LocalizedRejectionSampler(MissingnessMechanism):
    """Rejection sampling that only masks the coordinates ``V``.

    A row is accepted with probability ``ratio(x_V) / lambda_``; accepted
    rows get one of the ``2**|V| - 1`` patterns with something of ``V``
    observed, uniformly, and rejected rows lose all of ``V``.  With
    ``all_or_none=True`` accepted rows keep all of ``V`` instead.

    Parameters
    ----------
    scm_p, scm_alpha : GaussianScm or covariance matrix
    V : sequence of int
    lambda_mode : {"auto", "analytic", "empirical"}
        ``auto`` uses the analytic supremum when the ratio is bounded and
        otherwise the empirical maximum over the rows passed to ``fit``.
    lambda_max : float, optional
        Fixed value overriding ``lambda_mode``.
    all_or_none : bool
    """

    def __init__(self, scm_p, scm_alpha, V, lambda_mode="auto", lambda_max=None,
                 all_or_none=False):
        self.scm_p = scm_p
        self.scm_alpha = scm_alpha
        self.V = V
        self.lambda_mode = lambda_mode
        self.lambda_max = lambda_max
        self.all_or_none = all_or_none

    def fit(self, X=None, y=None):
        Sp = as_covariance(self.scm_p)
        Sa = as_covariance(self.scm_alpha)
        if Sp.shape != Sa.shape:
            raise ValueError("true and adversarial dimensions differ")
        d = Sp.shape[0]
        V = check_index_set(self.V, d, "V")
        if len(V) > MAX_LOCAL_SUPPORT_BITS:
            raise ValueError(f"|V|={len(V)} exceeds the support-size guard")
        self.V_ = V
        self.sigma_p_V_ = Sp[np.ix_(V, V)]
        self.sigma_alpha_V_ = Sa[np.ix_(V, V)]
        self.lambda_analytic_ = analytic_lambda(self.sigma_p_V_, self.sigma_alpha_V_)
        if self.lambda_max is not None:
            lam = float(self.lambda_max)
        elif self.lambda_mode == "analytic" or (
                self.lambda_mode == "auto" and math.isfinite(self.lambda_analytic_)):
            lam = self.lambda_analytic_
        elif self.lambda_mode in ("auto", "empirical"):
            if X is None:
                raise ValueError("empirical lambda requires calibration rows in fit(X)")
            X = check_data(X, d)
            lam = float(np.exp(np.max(self.log_ratio(X))))
        else:
            raise ValueError(f"unknown lambda_mode {self.lambda_mode!r}")
        if not math.isfinite(lam):
            raise ValueError("density ratio is unbounded; use an empirical lambda")
        if lam < 1.0 - 1e-12:
            raise ValueError(f"lambda must be >= 1, got {lam}")
        self.lambda_ = lam
        if self.all_or_none:
            self.support = patterns_for_subset(V, d)[[0, -1]]
        else:
            self.support = patterns_for_subset(V, d)
        return self

    def log_ratio(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return log_density_ratio(X[:, self.V_], self.sigma_p_V_, self.sigma_alpha_V_)

    def acceptance(self, X) -> np.ndarray:
        """``min(ratio(x_V) / lambda_, 1)`` per row."""
        check_fitted(self, "lambda_")
        return np.minimum(np.exp(self.log_ratio(X) - np.log(self.lambda_)), 1.0)

    def clip_count(self, X) -> int:
        """Rows whose ratio exceeds ``lambda_`` and were clipped."""
        check_fitted(self, "lambda_")
        return int(np.sum(self.log_ratio(X) > np.log(self.lambda_) + 1e-12))

    def pattern_probs(self, X) -> np.ndarray:
        a = self.acceptance(X)
        probs = np.empty((a.size, self.support.shape[0]))
        probs[:, 0] = 1.0 - a
        if self.all_or_none:
            probs[:, 1] = a
        else:
            probs[:, 1:] = (a / (self.support.shape[0] - 1))[:, None]
        return probs

    def closed_form_marginals(self) -> np.ndarray:
        """Marginal pattern probabilities under the true law, assuming
        ``lambda_`` is the true supremum (no clipping)."""
        check_fitted(self, "lambda_")
        k = self.support.shape[0]
        p = np.full(k, 1.0 / ((k - 1) * self.lambda_))
        p[0] = 1.0 - 1.0 / self.lambda_
        return p


def AllOrNoneRejectionSampler(scm_p, scm_alpha, V, lambda_mode="auto", lambda_max=None):
    """Localized rejection sampling whose accepted rows keep all of ``V``."""
    return LocalizedRejectionSampler(scm_p, scm_alpha, V, lambda_mode, lambda_max,
                                     all_or_none=True)


class GeneralizedRejectionSampler(MissingnessMechanism):
    """Rejection sampling over every nonzero observation pattern.

    Pattern ``r`` (observed set ``o``) gets ``pi[r] * ratio_o(x_o) / lam_r``
    and the all-missing pattern takes the rest.  ``pi`` defaults to the
    uniform ``1 / (2**d - 1)``, which is always admissible.  Inadmissible
    custom weights are clamped at evaluation time with a warning.
    """

    def __init__(self, scm_p, scm_alpha, pi=None, lambda_mode="auto"):
        self.scm_p = scm_p
        self.scm_alpha = scm_alpha
        self.pi = pi
        self.lambda_mode = lambda_mode

    def fit(self, X=None, y=None):
        Sp = as_covariance(self.scm_p)
        Sa = as_covariance(self.scm_alpha)
        d = Sp.shape[0]
        if d > MAX_GENERALIZED_DIM:
            raise ValueError(f"d={d} exceeds {MAX_GENERALIZED_DIM} for full-support enumeration")
        self.support = patterns_for_subset(range(d), d)
        k = self.support.shape[0]
        if self.pi is None:
            pi = np.full(k, 1.0 / (k - 1))
        else:
            pi = np.asarray(self.pi, dtype=float).copy()
            if pi.shape != (k,):
                raise ValueError(f"pi must have length {k}")
        pi[0] = 0.0
        if np.any(pi < 0) or np.any(pi > 1):
            raise ValueError("pi entries must lie in [0, 1]")
        self.pi_ = pi
        self._blocks = []
        lam = np.ones(k)
        Xc = None if X is None else check_data(X, d)
        for r in range(1, k):
            o = np.flatnonzero(self.support[r])
            Sp_o, Sa_o = Sp[np.ix_(o, o)], Sa[np.ix_(o, o)]
            self._blocks.append((o, Sp_o, Sa_o))
            lr = analytic_lambda(Sp_o, Sa_o) if self.lambda_mode != "empirical" else math.inf
            if not math.isfinite(lr):
                if self.lambda_mode == "analytic":
                    raise ValueError(f"pattern {r}: density ratio is unbounded")
                if Xc is None:
                    raise ValueError("empirical lambda requires calibration rows in fit(X)")
                lr = float(np.exp(np.max(log_density_ratio(Xc[:, o], Sp_o, Sa_o))))
            lam[r] = lr
        self.lambda_star_ = lam
        if Xc is not None and np.any(self._raw(Xc)[:, 0] < -1e-12):
            warnings.warn("pi is inadmissible on the calibration rows", RuntimeWarning)
        return self

    def _raw(self, X):
        check_fitted(self, "lambda_star_")
        X = np.atleast_2d(X)
        probs = np.zeros((X.shape[0], self.support.shape[0]))
        for r, (o, Sp_o, Sa_o) in enumerate(self._blocks, start=1):
            ratio = np.exp(log_density_ratio(X[:, o], Sp_o, Sa_o) - np.log(self.lambda_star_[r]))
            probs[:, r] = self.pi_[r] * np.minimum(ratio, 1.0)
        probs[:, 0] = 1.0 - probs[:, 1:].sum(axis=1)
        return probs

    def pattern_probs(self, X) -> np.ndarray:
        probs = self._raw(X)
        bad = probs[:, 0] < 0
        if np.any(bad):
            warnings.warn(f"{int(bad.sum())} rows with negative P(r=0|x); clamped",
                          RuntimeWarning)
            probs[bad, 0] = 0.0
            probs[bad] /= probs[bad].sum(axis=1, keepdims=True)
        return probs

    def closed_form_marginals(self) -> np.ndarray:
        check_fitted(self, "lambda_star_")
        p = self.pi_ / self.lambda_star_
        p[0] = 1.0 - p[1:].sum()
        return p


# --------------------------------------------------------------------------
# MCAR matching and missingness rates

def _mc_rows(scm_p, X, n_mc, seed):
    if X is not None:
        return np.asarray(X, dtype=float)
    if scm_p is None:
        raise ValueError("need either scm_p or rows X")
    if not isinstance(scm_p, GaussianScm):
        rng = np.random.default_rng(seed)
        S = as_covariance(scm_p)
        return rng.multivariate_normal(np.zeros(S.shape[0]), S, size=n_mc)
    return sample(scm_p, n_mc, seed)


def _has_exact_lambda(mech) -> bool:
    if isinstance(mech, LocalizedRejectionSampler):
        return mech.lambda_max is None and math.isfinite(mech.lambda_analytic_) and \
            mech.lambda_ == mech.lambda_analytic_
    return False


def mcar_from_mnar(mech: MissingnessMechanism, scm_p=None, n_mc: int = 100_000,
                   seed=None, X=None, method="auto") -> McarMechanism:
    """MCAR mechanism with the same marginal pattern distribution as ``mech``.

    ``method="monte_carlo"`` averages ``mech.pattern_probs`` over ``n_mc``
    draws from ``scm_p`` (or over the given rows ``X``).  ``closed_form`` uses
    the rejection-sampling marginals and ``auto`` picks it only when the
    mechanism's lambda is the exact supremum.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if isinstance(mech, McarMechanism):
        return McarMechanism(mech.support.copy(), np.asarray(mech.probs, float).copy())
    use_closed = method == "closed_form" or (method == "auto" and _has_exact_lambda(mech))
    if use_closed:
        if not hasattr(mech, "closed_form_marginals"):
            raise CapabilityError(f"{type(mech).__name__} has no closed-form marginals")
        probs = mech.closed_form_marginals()
        if getattr(mech, "all_or_none", False):
            probs = np.array([1.0 - 1.0 / mech.lambda_, 1.0 / mech.lambda_])
    elif method in ("auto", "monte_carlo"):
        probs = mech.pattern_probs(_mc_rows(scm_p, X, n_mc, seed)).mean(axis=0)
    else:
        raise ValueError(f"unknown method {method!r}")
    return McarMechanism(mech.support.copy(), probs / probs.sum())


def expected_missingness_rate(mech: MissingnessMechanism, mode="monte_carlo", scm_p=None,
                              n_mc: int = 100_000, seed=None, X=None, return_se=False):
    """Expected fraction of masked entries per row.

    ``closed_form`` is available for MCAR and rejection-sampling mechanisms
    and trusts their lambda values; ``monte_carlo`` averages the per-row
    expected rate over draws from ``scm_p`` (or over ``X``) and can also
    return its standard error.
    """
    if mode == "closed_form":
        d = mech.n_features
        ell = mech.missing_counts()
        if isinstance(mech, McarMechanism):
            value = float(np.asarray(mech.probs) @ ell / d)
        elif isinstance(mech, LocalizedRejectionSampler):
            lam, nv = mech.lambda_, len(mech.V_)
            if mech.all_or_none:
                value = (1 - 1 / lam) * nv / d
            else:
                value = (1 - 1 / lam) * nv / d + ell[1:].mean() / (lam * d)
        elif isinstance(mech, GeneralizedRejectionSampler):
            p = mech.pi_[1:] / mech.lambda_star_[1:]
            value = float(1.0 - np.sum(p * (1 - ell[1:] / d)))
        else:
            raise CapabilityError(f"no closed-form rate for {type(mech).__name__}")
        return (value, 0.0) if return_se else value
    if mode != "monte_carlo":
        raise ValueError(f"unknown mode {mode!r}")
    rows = mech.expected_rate_per_row(_mc_rows(scm_p, X, n_mc, seed))
    value = float(rows.mean())
    if return_se:
        return value, float(rows.std(ddof=1) / np.sqrt(rows.size))
    return value
