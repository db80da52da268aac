"""Input validation helpers shared by the estimators."""
import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array


def check_square(W, name="matrix"):
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"{name} must be square, got shape {W.shape}")
    return W


def check_covariance(S, name="covariance", sym_tol=1e-10):
    """Square, finite and symmetric within ``sym_tol``; returned symmetrized.

    Positive definiteness is checked lazily by the Cholesky factorizations of
    the callers.
    """
    S = check_square(S, name)
    if not np.all(np.isfinite(S)):
        raise ValueError(f"{name} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(S))))
    if np.max(np.abs(S - S.T)) > sym_tol * scale:
        raise ValueError(f"{name} is not symmetric")
    return 0.5 * (S + S.T)


def check_data(X, n_features=None):
    X = check_array(X, dtype=float, ensure_all_finite=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} columns, got {X.shape[1]}")
    return X


def check_index_set(idx, d, name="index set"):
    idx = sorted({int(i) for i in idx})
    if not idx:
        raise ValueError(f"{name} must be non-empty")
    if idx[0] < 0 or idx[-1] >= d:
        raise ValueError(f"{name} {idx} out of range for d={d}")
    return idx


def check_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")
