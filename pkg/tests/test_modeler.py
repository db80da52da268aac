import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from advmiss.data import Dataset, MaskedDataset
from advmiss.graphs import hamming_distance
from advmiss.modeler import (INIT_SCHEMES, PC, FitResult, MeanImputeNotears, MissDAG,
                             NotearsConvergenceError, SufficientStats, acyclicity_h,
                             e_step_stats, implied_covariance, init_covariance,
                             mean_impute_notears, missdag, notears_fit, notears_gram,
                             observed_loglik, pc_fisherz, variance_update)
from advmiss.scm import FactorizationError, GaussianScm, covariance_of, sample, scm_one

from conftest import random_scm
from oracles import central_difference, kl_gauss, mvn_logpdf


def random_masked(rng, d=4, n=200, p_miss=0.3, scm=None):
    scm = scm or random_scm(rng, d)
    X = sample(scm, n, rng)
    R = rng.random((n, d)) > p_miss
    return MaskedDataset(tuple(f"X{j}" for j in range(d)), X, R), scm


def full(X):
    X = np.asarray(X, float)
    return MaskedDataset(tuple(f"X{j}" for j in range(X.shape[1])), X, np.ones(X.shape, bool))


class TestInit:
    def test_identity_and_true(self, rng):
        mds, scm = random_masked(rng)
        np.testing.assert_array_equal(init_covariance("Identity", mds), np.eye(4))
        S = covariance_of(scm)
        np.testing.assert_array_equal(init_covariance("True", mds, S), S)
        with pytest.raises(ValueError):
            init_covariance("True", mds)

    @pytest.mark.parametrize("scheme", ["EmpDiag", "RandomSpd", "InvWishart"])
    def test_diagonal_matches_observed_variances(self, rng, scheme):
        mds, _ = random_masked(rng)
        S = init_covariance(scheme, mds, seed=3)
        v = [mds.values[mds.patterns[:, j], j].var(ddof=1) for j in range(4)]
        np.testing.assert_allclose(np.diag(S), v, rtol=1e-10)
        assert np.linalg.eigvalsh(S).min() > 0

    def test_seeded(self, rng):
        mds, _ = random_masked(rng)
        np.testing.assert_array_equal(init_covariance("InvWishart", mds, seed=5),
                                      init_covariance("InvWishart", mds, seed=5))

    def test_errors(self):
        mds = MaskedDataset(("a", "b"), [[1.0, 2.0], [3.0, 4.0]], [[1, 1], [1, 0]])
        with pytest.raises(ValueError, match="fewer than 2"):
            init_covariance("EmpDiag", mds)
        with pytest.raises(ValueError):
            init_covariance("Nope", full(np.eye(3)))
        assert set(INIT_SCHEMES) == {"EmpDiag", "Identity", "True", "RandomSpd", "InvWishart"}


class TestEStep:
    def test_fully_observed(self, rng):
        X = rng.standard_normal((10, 3))
        np.testing.assert_allclose(e_step_stats(full(X), np.eye(3)).t_hat, X.T @ X)

    def test_hand_example(self):
        mds = MaskedDataset(("a", "b"), [[1.0, 0.0]], [[True, False]])
        T = e_step_stats(mds, [[1, 0.5], [0.5, 1]]).t_hat
        np.testing.assert_allclose(T, [[1, 0.5], [0.5, 1.0]])

    def test_fully_masked_row(self):
        S = np.array([[2.0, 0.3], [0.3, 1.0]])
        mds = MaskedDataset(("a", "b"), [[0.0, 0.0]], [[False, False]])
        np.testing.assert_allclose(e_step_stats(mds, S).t_hat, S)

    def test_simulation_oracle(self, rng):
        mds, scm = random_masked(rng, d=4, n=25, p_miss=0.4)
        S = covariance_of(scm) + 0.2 * np.eye(4)  # any PD sigma, not the truth
        T = e_step_stats(mds, S).t_hat
        M = 4000
        draws = np.zeros((M, 4, 4))
        for i in range(mds.n):
            o = np.flatnonzero(mds.patterns[i])
            m = np.flatnonzero(~mds.patterns[i])
            x = np.tile(mds.values[i], (M, 1))
            if m.size:
                if o.size:
                    Soo = S[np.ix_(o, o)]
                    mu = S[np.ix_(m, o)] @ np.linalg.solve(Soo, mds.values[i, o])
                    C = S[np.ix_(m, m)] - S[np.ix_(m, o)] @ np.linalg.solve(Soo, S[np.ix_(o, m)])
                else:
                    mu, C = np.zeros(m.size), S[np.ix_(m, m)]
                x[:, m] = rng.multivariate_normal(mu, C, M)
            draws += x[:, :, None] * x[:, None, :]
        se = draws.std(axis=0) / np.sqrt(M)
        assert np.all(np.abs(draws.mean(axis=0) - T) <= 3.5 * se + 1e-9)

    def test_singular_block(self):
        mds = MaskedDataset(("a", "b", "c"), [[1.0, 1.0, 0.0]], [[True, True, False]])
        S = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1.0]]) + np.diag([1e-18, 0, 0])
        with pytest.raises(FactorizationError):
            e_step_stats(mds, S)

    def test_psd(self, rng):
        mds, scm = random_masked(rng, d=5)
        T = e_step_stats(mds, covariance_of(scm)).t_hat
        np.testing.assert_allclose(T, T.T)
        assert np.linalg.eigvalsh(T).min() > -1e-8


class TestLoglik:
    def test_complete(self, rng):
        X = rng.standard_normal((30, 3))
        S = covariance_of(scm_one())
        assert observed_loglik(full(X), S) == pytest.approx(mvn_logpdf(X, S).sum(), rel=1e-12)

    def test_single_coordinate(self):
        mds = MaskedDataset(("a", "b"), [[0.0, 0.0], [0.0, 0.0]], [[1, 0], [0, 0]])
        assert observed_loglik(mds, np.eye(2)) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_mixed_patterns(self, rng):
        mds, scm = random_masked(rng, d=3, n=40)
        S = covariance_of(scm)
        ref = 0.0
        for x, r in zip(mds.values, mds.patterns):
            if r.any():
                ref += mvn_logpdf(x[r], S[np.ix_(r, r)])
        assert observed_loglik(mds, S) == pytest.approx(ref, rel=1e-10)


def h_series(W, terms=60):
    A = W * W
    P = np.eye(len(W))
    total, fact = 0.0, 1.0
    for k in range(1, terms):
        P = P @ A
        fact *= k
        total += np.trace(P) / fact
    return total


class TestAcyclicity:
    def test_zero_and_triangular(self, rng):
        assert acyclicity_h(np.zeros((3, 3)))[0] == 0.0
        assert acyclicity_h(np.tril(rng.standard_normal((4, 4)), -1))[0] == pytest.approx(0, abs=1e-12)

    def test_two_cycle(self):
        W = np.array([[0, 1.0], [1.0, 0]])
        assert h_series(W) == pytest.approx(2 * math.cosh(1) - 2, abs=1e-14)
        assert acyclicity_h(W)[0] == pytest.approx(1.08616, abs=1e-5)
        assert acyclicity_h(W)[0] == pytest.approx(h_series(W), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_value_and_gradient(self, seed):
        W = np.random.default_rng(seed).uniform(-0.8, 0.8, (5, 5))
        h, g = acyclicity_h(W)
        assert h == pytest.approx(h_series(W), rel=1e-10, abs=1e-12)
        assert h >= 0
        fd = central_difference(lambda z: acyclicity_h(z.reshape(5, 5))[0], W.ravel(), 1e-5)
        np.testing.assert_allclose(g.ravel(), fd, rtol=1e-5, atol=1e-8)


class TestNotears:
    def test_scm_one_recovery(self):
        X = sample(scm_one(), 10_000, 0)
        B = notears_gram(SufficientStats(X.T @ X, X.shape[0]), l1=0.01)
        assert abs(B[0, 1] + 0.9) < 0.05 and abs(B[0, 2] + 0.8) < 0.05
        mask = np.ones((3, 3), bool)
        mask[0, 1] = mask[0, 2] = False
        assert np.abs(B[mask]).max() < 0.1
        assert acyclicity_h(B)[0] <= 1e-8
        assert np.all(np.diag(B) == 0)

    def test_default_l1_shrinks(self):
        X = sample(scm_one(), 10_000, 0)
        B = notears_gram(SufficientStats(X.T @ X, X.shape[0]))
        assert -0.9 < B[0, 1] < -0.6 and -0.8 < B[0, 2] < -0.5

    def test_independent(self):
        n = 1000
        B = notears_gram(SufficientStats(n * np.eye(4), n))
        assert np.abs(B).max() < 0.05

    def test_row_order_invariance(self, rng):
        X = sample(scm_one(), 2000, 1)
        perm = rng.permutation(2000)
        B1 = notears_gram(SufficientStats(X.T @ X, 2000))
        B2 = notears_gram(SufficientStats(X[perm].T @ X[perm], 2000))
        np.testing.assert_allclose(B1, B2, atol=1e-6)

    def test_rho_max(self):
        X = sample(scm_one(), 500, 0)
        st_ = SufficientStats(X.T @ X, 500)
        with pytest.raises(NotearsConvergenceError) as err:
            notears_gram(st_, l1=0.0, h_tol=1e-30, rho_max=1e2)
        assert err.value.W is not None and err.value.h > 0
        W = notears_gram(st_, l1=0.0, h_tol=1e-30, rho_max=1e2, on_rho_max="return")
        np.testing.assert_allclose(W, err.value.W)


class TestVariance:
    def test_zero_b(self, rng):
        X = rng.standard_normal((50, 3))
        st_ = SufficientStats(X.T @ X, 50)
        assert variance_update(st_, np.zeros((3, 3))) == pytest.approx(np.sum(X**2) / 150)
        np.testing.assert_allclose(variance_update(st_, np.zeros((3, 3)), "per_node"),
                                   np.sum(X**2, axis=0) / 50)

    def test_true_b(self):
        p = scm_one()
        X = sample(p, 100_000, 0)
        st_ = SufficientStats(X.T @ X, X.shape[0])
        assert variance_update(st_, p.B) == pytest.approx(1.0, abs=0.03)
        np.testing.assert_allclose(variance_update(st_, p.B, "per_node"), 1.0, atol=0.05)

    def test_floor(self):
        st_ = SufficientStats(np.zeros((2, 2)), 5)
        with pytest.warns(RuntimeWarning):
            assert variance_update(st_, np.zeros((2, 2))) == 1e-8

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            variance_update(SufficientStats(np.eye(2), 1), np.zeros((2, 2)), "x")

    def test_implied_covariance(self):
        p = scm_one()
        np.testing.assert_allclose(implied_covariance(p.B, 1.0), covariance_of(p))


class TestMissDag:
    def test_fully_observed_recovers(self):
        p = scm_one()
        fit = missdag(full(sample(p, 1000, 0)))
        assert isinstance(fit, FitResult)
        assert hamming_distance(p.dag(), fit.graph) == 0

    def test_true_init_matches_direct_fit(self):
        p = scm_one()
        X = sample(p, 1000, 1)
        fit = missdag(full(X), "True", sigma_true=covariance_of(p))
        direct = notears_fit(X)
        np.testing.assert_allclose(fit.b_hat, direct.b_hat, atol=1e-6)

    @pytest.mark.parametrize("seed", range(20))
    def test_em_monotone(self, seed):
        rng = np.random.default_rng(seed)
        mds, _ = random_masked(rng, d=int(rng.integers(3, 6)), n=300, p_miss=0.3)
        fit = missdag(mds, INIT_SCHEMES[seed % 5] if seed % 5 != 2 else "Identity", seed=seed,
                      sigma_true=None)
        trace = [fit.loglik_init, *fit.loglik_trace][1:]
        assert np.all(np.diff(trace) >= -1e-7)
        assert fit.n_iter == len(fit.loglik_trace) >= 1

    def test_graph_is_thresholded_support(self, rng):
        mds, _ = random_masked(rng, d=4)
        fit = missdag(mds)
        if fit.graph is not None:
            np.testing.assert_array_equal(fit.graph.adjacency() != 0, np.abs(fit.b_hat) > 0.3)

    def test_cap(self, rng):
        mds, _ = random_masked(rng, d=4)
        fit = missdag(mds, eps=-np.inf, max_em_iter=3)
        assert fit.n_iter <= 3

    def test_solver_error_carries_trace(self, rng):
        mds, _ = random_masked(rng, d=4)
        with pytest.raises(NotearsConvergenceError) as err:
            missdag(mds, notears_opts={"rho_max": 1e1, "h_tol": 1e-30})
        assert err.value.trace == []

    def test_per_node_mode(self):
        # per-node variances are only identified up to Markov equivalence,
        # so check the implied covariance rather than the noise vector
        p = GaussianScm(scm_one().B, [1.0, 2.0, 0.5])
        X = sample(p, 5000, 0)
        fit = missdag(full(X), var_mode="per_node", l1=0.01)
        assert fit.noise.shape == (3,)
        assert kl_gauss(X.T @ X / 5000, fit.sigma_hat) < 0.01


class TestMeanNotears:
    def test_zero_missing_equals_direct(self):
        X = sample(scm_one(), 500, 0)
        a = mean_impute_notears(full(X))
        np.testing.assert_allclose(a.b_hat, notears_fit(X).b_hat)


class TestPC:
    def test_independent_type_one(self):
        false_edges = 0
        for s in range(20):
            G = pc_fisherz(np.random.default_rng(s).standard_normal((5000, 3)))
            false_edges += int(np.triu((G + G.T) > 0, 1).sum())
        assert false_edges / (20 * 3) <= 0.05

    def test_chain(self):
        B = np.zeros((3, 3))
        B[0, 1] = B[1, 2] = 0.9
        X = sample(GaussianScm(B, np.ones(3)), 5000, 0)
        G = pc_fisherz(X)
        skel = (G + G.T) > 0
        assert skel[0, 1] and skel[1, 2] and not skel[0, 2]
        np.testing.assert_array_equal(G, pc_fisherz(X))

    def test_collider(self):
        B = np.zeros((3, 3))
        B[0, 2] = B[1, 2] = 0.8
        G = pc_fisherz(sample(GaussianScm(B, np.ones(3)), 5000, 1))
        np.testing.assert_array_equal(G, [[0, 0, 1], [0, 0, 1], [0, 0, 0]])

    def test_meek_r1(self):
        # 0 -> 2 <- 1 and 2 - 3 must orient 2 -> 3
        B = np.zeros((4, 4))
        B[0, 2] = B[1, 2] = B[2, 3] = 0.8
        G = pc_fisherz(sample(GaussianScm(B, np.ones(4)), 5000, 2))
        assert G[2, 3] == 1 and G[3, 2] == 0

    def test_testwise_and_masked(self, rng):
        B = np.zeros((3, 3))
        B[0, 1] = B[1, 2] = 0.9
        X = sample(GaussianScm(B, np.ones(3)), 3000, 0)
        mds = MaskedDataset(("a", "b", "c"), X, rng.random((3000, 3)) > 0.2)
        for mode in ("complete", "testwise"):
            G = pc_fisherz(mds, deletion=mode)
            skel = (G + G.T) > 0
            assert skel[0, 1] and skel[1, 2] and not skel[0, 2]
        with pytest.raises(ValueError):
            pc_fisherz(mds, deletion="pairwise")

    def test_too_few_rows_keeps_edges(self):
        X = np.random.default_rng(0).standard_normal((3, 3))
        assert pc_fisherz(X).sum() == 6


class TestEstimators:
    def test_missdag_estimator(self):
        X = sample(scm_one(), 1000, 0)
        est = MissDAG().fit(full(X))
        assert est.predict().sum() == 2
        assert clone(est).get_params()["init"] == "EmpDiag"

    def test_mean_notears_estimator(self):
        X = sample(scm_one(), 1000, 0)
        assert MeanImputeNotears().fit(full(X)).predict().sum() == 2

    def test_pc_estimator(self):
        X = sample(scm_one(), 2000, 0)
        G = PC().fit(Dataset(("a", "b", "c"), X)).predict()
        assert G.shape == (3, 3)

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            PC().predict()
