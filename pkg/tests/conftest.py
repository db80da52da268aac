import numpy as np
import pytest
from hypothesis import strategies as st

from advmiss.scm import GaussianScm


def random_scm(rng, d, p_edge=0.5, support=None):
    """Random SCM on a permuted upper-triangular support (or a given one)."""
    if support is None:
        perm = rng.permutation(d)
        upper = np.triu(rng.random((d, d)) < p_edge, 1)
        support = upper[np.ix_(np.argsort(perm), np.argsort(perm))]
    W = rng.uniform(0.5, 2.0, (d, d)) * rng.choice([-1.0, 1.0], (d, d))
    B = np.where(support, W, 0.0)
    return GaussianScm(B, rng.uniform(0.5, 2.0, d))


@st.composite
def scm_pairs(draw, max_d=6):
    """Two SCMs sharing one random DAG."""
    seed = draw(st.integers(0, 2**32 - 1))
    d = draw(st.integers(1, max_d))
    rng = np.random.default_rng(seed)
    p = random_scm(rng, d)
    q = random_scm(rng, d, support=p.B != 0)
    return p, q


@st.composite
def spd_matrices(draw, min_d=1, max_d=6):
    seed = draw(st.integers(0, 2**32 - 1))
    d = draw(st.integers(min_d, max_d))
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((d, d))
    return A @ A.T + 0.1 * np.eye(d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def shrunk_covariance(rng, sigma_p, max_shrink=0.7):
    """Covariance below ``sigma_p`` in Loewner order, so every density ratio
    of its marginals to those of ``sigma_p`` is bounded."""
    d = sigma_p.shape[0]
    L = np.linalg.cholesky(sigma_p)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    M = Q @ np.diag(rng.uniform(0.0, max_shrink, d)) @ Q.T
    S = L @ (np.eye(d) - M) @ L.T
    return 0.5 * (S + S.T)


@st.composite
def bounded_pairs(draw, min_d=2, max_d=5):
    """(sigma_p, sigma_alpha, V) with a finite analytic lambda."""
    seed = draw(st.integers(0, 2**32 - 1))
    d = draw(st.integers(min_d, max_d))
    rng = np.random.default_rng(seed)
    from advmiss.scm import covariance_of
    Sp = covariance_of(random_scm(rng, d))
    Sa = shrunk_covariance(rng, Sp)
    V = sorted(rng.choice(d, size=draw(st.integers(1, d)), replace=False).tolist())
    return Sp, Sa, V


# acceptance summary: one line per criterion, repeated at the end of the run
_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
