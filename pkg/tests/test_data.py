import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from advmiss.adversary import (LocalizedRejectionSampler, always_observed, mcar_from_mnar,
                               optimal_adversarial_scm)
from advmiss.data import (DataFormatError, Dataset, ImputationError, MaskedDataset,
                          apply_mechanism, load_dataset, load_masked, load_sachs,
                          mean_impute, save_dataset, save_masked)
from advmiss.scm import covariance_of, sample, scm_one


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.fixture
def scm1_mech():
    p = scm_one()
    a = optimal_adversarial_scm(covariance_of(p), p.dag().without_edge(0, 1))
    X = sample(p, 5000, 0)
    return p, LocalizedRejectionSampler(p, a, [0, 1]).fit(X), X


class TestLoad:
    def test_round_trip(self, tmp_path):
        X = np.random.default_rng(0).standard_normal((7, 3))
        ds = Dataset(("a", "b", "c"), X)
        save_dataset(ds, tmp_path / "x.csv")
        back = load_dataset(tmp_path / "x.csv")
        assert back.columns == ("a", "b", "c")
        np.testing.assert_array_equal(back.values, X)

    def test_center(self, tmp_path):
        p = write(tmp_path, "a,b\n1,10\n2,20\n6,33\n")
        ds = load_dataset(p, center=True)
        assert ds.centered
        np.testing.assert_allclose(ds.values.mean(axis=0), 0, atol=1e-10)

    def test_sachs(self):
        ds = load_sachs()
        assert (ds.n, ds.d) == (853, 11)
        assert {"plc", "pip2", "pip3"} <= set(ds.columns)
        np.testing.assert_allclose(ds.values.mean(axis=0), 0, atol=1e-10)
        raw = load_sachs(center=False, column_map={})
        assert "plcg" in raw.columns and raw.values.min() >= 0

    @pytest.mark.parametrize("text,match", [
        ("", "header"),
        ("a,b\n", "no data"),
        ("a,b\n1,2\n3\n", r":3: expected 2"),
        ("a,b\n1,x\n", r":2: non-numeric cell 'x' in column 'b'"),
        ("a,b\n1,\n", r":2: missing value"),
        ("a,b\n1,inf\n", "non-finite"),
        ("a,\n1,2\n", "blank column"),
    ])
    def test_errors(self, tmp_path, text, match):
        with pytest.raises(DataFormatError, match=match):
            load_dataset(write(tmp_path, text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError, match="nope.csv"):
            load_dataset(tmp_path / "nope.csv")

    def test_dataset_invariants(self):
        with pytest.raises(ValueError):
            Dataset(("a",), np.array([[np.nan]]))
        with pytest.raises(ValueError):
            Dataset(("a", "b"), np.zeros((2, 3)))
        ds = Dataset(("a",), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            ds.values[0, 0] = 1.0


class TestMasked:
    def test_sentinel_iff_masked(self):
        X = np.arange(6.0).reshape(3, 2) + 1
        mds = MaskedDataset(("a", "b"), X, [[1, 0], [1, 1], [0, 1]])
        assert mds.values[0, 1] == 0.0 and mds.values[2, 0] == 0.0
        np.testing.assert_array_equal(np.isnan(mds.to_nan()), ~mds.patterns)

    def test_from_nan(self):
        mds = MaskedDataset.from_nan(("a", "b"), [[1.0, np.nan], [np.nan, np.nan]])
        np.testing.assert_array_equal(mds.patterns, [[True, False], [False, False]])
        assert mds.missing_rate() == 0.75

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 5))
    def test_round_trip(self, seed, n, d):
        import tempfile
        from pathlib import Path
        rng = np.random.default_rng(seed)
        mds = MaskedDataset(tuple(f"c{j}" for j in range(d)), rng.standard_normal((n, d)),
                            rng.random((n, d)) < 0.7)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "m.csv"
            save_masked(mds, path)
            back = load_masked(path)
        np.testing.assert_array_equal(back.values, mds.values)
        np.testing.assert_array_equal(back.patterns, mds.patterns)

    def test_empty_fields_and_nan_text(self, tmp_path):
        mds = MaskedDataset(("a", "b"), [[1.0, 2.0]], [[True, False]])
        save_masked(mds, tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text() == "a,b\n1.0,\n"
        back = load_masked(write(tmp_path, "a,b\nNaN,2\n,3\n"))
        np.testing.assert_array_equal(back.patterns, [[False, True], [False, True]])

    def test_zero_rows(self, tmp_path):
        with pytest.raises(DataFormatError, match="no data"):
            load_masked(write(tmp_path, "a,b\n"))


class TestApplyMechanism:
    def test_always_observed(self):
        ds = Dataset(("a", "b", "c"), sample(scm_one(), 50, 0))
        mds = apply_mechanism(ds, always_observed(3), 0)
        np.testing.assert_array_equal(mds.values, ds.values)
        assert mds.missing_rate() == 0.0 and mds.info["missing_rate"] == 0.0

    def test_masks_only_v_and_reports(self, scm1_mech):
        p, mech, X = scm1_mech
        mds = apply_mechanism(X, mech, 3)
        assert mds.patterns[:, 2].all()
        assert mds.info["column_missing_rates"][2] == 0.0
        assert mds.info["missing_rate"] == pytest.approx(mds.missing_rate())
        assert "clip_count" in mds.info

    def test_deterministic(self, scm1_mech):
        _, mech, X = scm1_mech
        a, b = apply_mechanism(X, mech, 9), apply_mechanism(X, mech, 9)
        np.testing.assert_array_equal(a.patterns, b.patterns)
        np.testing.assert_array_equal(a.values, b.values)

    def test_dimension_mismatch(self, scm1_mech):
        _, mech, _ = scm1_mech
        with pytest.raises(ValueError):
            apply_mechanism(np.zeros((3, 4)), mech)

    def test_pattern_frequencies_chi_square(self, scm1_mech):
        p, mech, _ = scm1_mech
        X = sample(p, 50_000, 2)
        # calibration from a larger sample keeps clipping negligible
        mech = LocalizedRejectionSampler(mech.scm_p, mech.scm_alpha, [0, 1]).fit(
            sample(p, 200_000, 1))
        mcar = mcar_from_mnar(mech, p, n_mc=400_000, seed=3, method="monte_carlo")
        idx = apply_mechanism(X, mech, 4).info["pattern_index"]
        counts = np.bincount(idx, minlength=4)
        expected = mcar.probs * X.shape[0]
        assert stats.chisquare(counts, expected).pvalue > 0.01


class TestImpute:
    def test_identity(self):
        ds = Dataset(("a", "b"), [[1.0, 2.0], [3.0, 5.0]])
        out = mean_impute(MaskedDataset(ds.columns, ds.values, np.ones((2, 2), bool)))
        np.testing.assert_array_equal(out.values, ds.values)

    def test_arithmetic(self):
        mds = MaskedDataset(("a",), [[1.0], [3.0], [99.0]], [[True], [True], [False]])
        assert mean_impute(mds).values[2, 0] == 2.0

    def test_fully_masked_column(self):
        mds = MaskedDataset(("a", "b"), [[1.0, 0.0]], [[True, False]])
        with pytest.raises(ImputationError, match="'b'"):
            mean_impute(mds)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_keeps_observed_and_means(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((40, 4))
        R = rng.random((40, 4)) < 0.6
        R[0] = True
        mds = MaskedDataset(("a", "b", "c", "d"), X, R)
        out = mean_impute(mds).values
        np.testing.assert_array_equal(out[R], X[R])
        obs_means = np.array([X[R[:, j], j].mean() for j in range(4)])
        np.testing.assert_allclose(out.mean(axis=0), obs_means, atol=1e-12)
