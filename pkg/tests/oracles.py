"""Independent reference computations used by the tests.

Nothing here imports the code under test except plain data containers.
"""
import numpy as np
from scipy import optimize, stats


def kl_gauss(S1, S2, m1=None, m2=None):
    """KL(N(m1, S1) || N(m2, S2)) via slogdet and an explicit inverse."""
    S1, S2 = np.asarray(S1, float), np.asarray(S2, float)
    d = S1.shape[0]
    dm = np.zeros(d) if m1 is None and m2 is None else \
        (np.zeros(d) if m2 is None else np.asarray(m2)) - (np.zeros(d) if m1 is None else np.asarray(m1))
    P2 = np.linalg.inv(S2)
    return 0.5 * (np.trace(P2 @ S1) + dm @ P2 @ dm - d
                  + np.linalg.slogdet(S2)[1] - np.linalg.slogdet(S1)[1])


def scm_cov(B, D):
    A = np.linalg.inv(np.eye(len(D)) - B)
    return A.T @ np.diag(D) @ A


def brute_force_adversary_kl(sigma_p, support, n_starts=3, seed=0):
    """Minimize KL(N(0, sigma_p) || SCM(B, D)) over B on ``support`` and D > 0.

    L-BFGS-B projects each step onto the box D >= 1e-6; several starts guard
    against a poor local basin.  Returns the smallest KL found.
    """
    support = np.asarray(support, bool)
    idx = np.flatnonzero(support.ravel())
    d = sigma_p.shape[0]
    m = idx.size

    def unpack(z):
        B = np.zeros(d * d)
        B[idx] = z[:m]
        return B.reshape(d, d), z[m:]

    def f(z):
        B, D = unpack(z)
        return kl_gauss(sigma_p, scm_cov(B, D))

    rng = np.random.default_rng(seed)
    bounds = [(None, None)] * m + [(1e-6, None)] * d
    best = np.inf
    for k in range(n_starts):
        z0 = np.concatenate([0.3 * rng.standard_normal(m) * (k > 0), np.ones(d)])
        res = optimize.minimize(f, z0, method="L-BFGS-B", bounds=bounds,
                                options={"ftol": 1e-16, "gtol": 1e-12, "maxiter": 20000,
                                         "maxfun": 200000})
        best = min(best, res.fun)
    return best


def energy_test(X, Y, n_perm=199, seed=0):
    """Permutation p-value of the multivariate energy distance."""
    X = np.asarray(X, float).reshape(len(X), -1)
    Y = np.asarray(Y, float).reshape(len(Y), -1)
    Z = np.vstack([X, Y])
    sq = (Z * Z).sum(1)
    Dm = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * Z @ Z.T, 0.0))
    n, m = X.shape[0], Y.shape[0]

    def stat(z):
        Dz = Dm @ z
        xx = z @ Dz
        xy = (1 - z) @ Dz
        yy = (1 - z) @ Dm @ (1 - z)
        return 2 * xy / (n * m) - xx / n**2 - yy / m**2

    z = np.r_[np.ones(n), np.zeros(m)]
    obs = stat(z)
    rng = np.random.default_rng(seed)
    count = sum(stat(rng.permutation(z)) >= obs for _ in range(n_perm))
    return (count + 1) / (n_perm + 1)


def gaussian_moment_zscores(X, S):
    """|z|-scores of sample means and second moments of rows X against N(0, S)."""
    n = X.shape[0]
    zm = np.abs(X.mean(axis=0)) / np.sqrt(np.diag(S) / n)
    M = X.T @ X / n
    se = np.sqrt((np.outer(np.diag(S), np.diag(S)) + S**2) / n)
    zc = np.abs(M - S) / se
    return np.concatenate([zm, zc[np.triu_indices(S.shape[0])]])


def mvn_logpdf(x, S):
    return stats.multivariate_normal(np.zeros(S.shape[0]), S).logpdf(x)


def central_difference(f, z, h=1e-4):
    g = np.empty_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        g[i] = (f(z + e) - f(z - e)) / (2 * h)
    return g
