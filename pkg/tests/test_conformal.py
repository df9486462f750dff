import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conformal_ood.conformal import (
    CalibrationSet,
    NormalCDF,
    conformal_p_value,
    conformal_p_values,
    oracle_p_value,
)
from conformal_ood.errors import ConfigurationError

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


class TestConformalPValue:
    def test_hand_example(self):
        assert conformal_p_value([0.1, 0.5, 0.9], 0.7) == 0.5

    def test_above_all(self):
        assert conformal_p_value([0.1, 0.5, 0.9], 5.0) == 1 / 4

    def test_below_all(self):
        assert conformal_p_value([0.1, 0.5, 0.9], -5.0) == 1.0

    def test_ties_count_as_exceedances(self):
        assert conformal_p_value([1.0, 1.0, 2.0], 1.0) == 1.0
        assert conformal_p_value([1.0, 1.0, 2.0], 2.0) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            conformal_p_value([], 0.0)

    @pytest.mark.parametrize("bad", [[1.0, np.nan], [np.inf, 0.0]])
    def test_non_finite_calibration_rejected(self, bad):
        with pytest.raises(ConfigurationError):
            conformal_p_value(bad, 0.0)

    def test_non_finite_test_rejected(self):
        with pytest.raises(ConfigurationError):
            conformal_p_value([1.0], np.nan)

    @settings(max_examples=200, deadline=None)
    @given(arrays(float, st.integers(1, 40), elements=finite), finite, finite)
    def test_non_increasing_in_t(self, cal, t1, t2):
        lo, hi = sorted((t1, t2))
        assert conformal_p_value(cal, lo) >= conformal_p_value(cal, hi)

    @settings(max_examples=200, deadline=None)
    @given(arrays(float, st.integers(1, 40), elements=finite), finite)
    def test_value_on_grid(self, cal, t):
        p = conformal_p_value(cal, t)
        r = p * (1 + cal.size) - 1
        assert r == pytest.approx(round(r), abs=1e-9)
        assert 1 / (1 + cal.size) <= p <= 1.0


class TestCalibrationSet:
    def test_two_columns_example(self):
        cal = CalibrationSet.from_columns([[1, 2, 3], [10, 20, 30]])
        np.testing.assert_array_equal(conformal_p_values(cal, [2.5, 5]), [0.5, 1.0])

    def test_k1_matches_scalar(self):
        cal = CalibrationSet.from_columns([[0.1, 0.5, 0.9]])
        assert conformal_p_values(cal, [0.7])[0] == conformal_p_value([0.1, 0.5, 0.9], 0.7)

    def test_deterministic(self):
        cal = CalibrationSet(np.random.default_rng(0).normal(size=(50, 3)))
        t = [0.1, -0.2, 0.3]
        np.testing.assert_array_equal(conformal_p_values(cal, t), conformal_p_values(cal, t))

    def test_length_mismatch(self):
        cal = CalibrationSet.from_columns([[1, 2], [3, 4]])
        with pytest.raises(ConfigurationError):
            conformal_p_values(cal, [1.0])

    def test_unequal_columns(self):
        with pytest.raises(ConfigurationError):
            CalibrationSet.from_columns([[1, 2, 3], [1, 2]])

    def test_nan_rejected_with_location(self):
        arr = np.zeros((4, 2))
        arr[2, 1] = np.nan
        with pytest.raises(ConfigurationError, match="row 2, column 1"):
            CalibrationSet(arr)

    def test_immutable(self):
        cal = CalibrationSet(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            cal.scores[0, 0] = 1.0

    def test_default_names(self):
        assert CalibrationSet(np.zeros((3, 2))).score_names == ("s0", "s1")

    def test_sorted_index_matches_single_pass(self):
        rng = np.random.default_rng(3)
        # Rounded values force plenty of ties.
        scores = np.round(rng.normal(size=(200, 4)), 1)
        tests = np.round(rng.normal(size=(500, 4)), 1)
        cal = CalibrationSet(scores)
        batch = cal.p_values(tests)
        single = np.array([[conformal_p_value(scores[:, i], t[i]) for i in range(4)] for t in tests])
        np.testing.assert_array_equal(batch, single)


class TestSuperUniformity:
    @pytest.mark.parametrize("t", [0.05, 0.1, 0.25, 0.5])
    def test_marginal(self, t):
        rng = np.random.default_rng(int(t * 1000))
        n_cal, draws, per_draw = 19, 400, 250
        hits = 0
        for _ in range(draws):
            cal = CalibrationSet(rng.normal(size=(n_cal, 1)))
            hits += int(np.count_nonzero(cal.p_values(rng.normal(size=(per_draw, 1)))[:, 0] <= t))
        total = draws * per_draw
        rate = hits / total
        # Draws within one calibration set are dependent; use the number of
        # calibration draws for a conservative stderr.
        stderr = np.sqrt(max(t * (1 - t), 1e-12) / draws)
        assert rate <= t + 3 * stderr


class TestOracle:
    def test_standard_normal_center(self):
        assert oracle_p_value("standard_normal", 0.0) == 0.5

    def test_five_percent(self):
        assert oracle_p_value(NormalCDF(), 1.6449) == pytest.approx(0.05, abs=1e-5)

    def test_location_shift(self):
        assert oracle_p_value(NormalCDF(mean=2.0, std=1.0), 2.0) == 0.5

    def test_scale(self):
        assert oracle_p_value(NormalCDF(0.0, 2.0), 2.0) == pytest.approx(oracle_p_value("normal", 1.0), abs=1e-15)

    @pytest.mark.parametrize("family", ["cauchy", 3.0])
    def test_unsupported(self, family):
        with pytest.raises(ConfigurationError):
            oracle_p_value(family, 0.0)

    def test_bad_std(self):
        with pytest.raises(ConfigurationError):
            NormalCDF(0.0, 0.0)
