"""Tests for ranking and pricing-error metrics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepfactors.core_math import (
    alpha_rmse,
    alpha_stats_from_residuals,
    alpha_tstat,
    is_significant,
    oos_r_squared,
    rank_ascending,
)
from deepfactors.errors import NumericalError


class TestRankAscending:
    def test_basic(self):
        assert rank_ascending([3.0, 1.0, 2.0]).tolist() == [3, 1, 2]

    def test_tie_broken_by_index(self):
        assert rank_ascending([5.0, 5.0]).tolist() == [1, 2]

    def test_nonfinite_names_index(self):
        with pytest.raises(ValueError, match="index 2"):
            rank_ascending([1.0, 2.0, np.nan])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            rank_ascending([])

    def test_matches_sort_then_invert_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            m = int(rng.integers(1, 60))
            y = rng.normal(size=m)
            if rng.random() < 0.3:  # force ties
                y = np.round(y, 1)
            ranks = rank_ascending(y)
            # independent oracle: stable sort of (value, index) pairs
            order = sorted(range(m), key=lambda j: (y[j], j))
            expected = np.empty(m, dtype=int)
            for pos, j in enumerate(order):
                expected[j] = pos + 1
            np.testing.assert_array_equal(ranks, expected)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200))
    @settings(max_examples=200, deadline=None)
    def test_bijection_onto_1_to_m(self, values):
        ranks = rank_ascending(values)
        assert sorted(ranks.tolist()) == list(range(1, len(values) + 1))


class TestAlphaRmse:
    def test_zero(self):
        assert alpha_rmse([0.0, 0.0, 0.0]) == 0.0

    def test_hand_computed(self):
        assert alpha_rmse([0.3, -0.4]) == pytest.approx(np.sqrt((0.09 + 0.16) / 2), abs=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            alpha_rmse([])

    def test_permutation_invariant_and_scaling(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=40)
        assert alpha_rmse(a) == pytest.approx(alpha_rmse(rng.permutation(a)), abs=1e-15)
        assert alpha_rmse(2.5 * a) == pytest.approx(2.5 * alpha_rmse(a), rel=1e-12)


class TestOosRSquared:
    def test_perfect_model(self):
        assert oos_r_squared(0.0, 2.0) == 1.0

    def test_parity(self):
        assert oos_r_squared(2.0, 2.0) == 0.0

    def test_degenerate_benchmark(self):
        with pytest.raises(NumericalError, match="degenerate benchmark"):
            oos_r_squared(1.0, 0.0)

    def test_identity_with_ratio(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            a = float(rng.uniform(0, 5))
            b = float(rng.uniform(0.01, 5))
            assert abs(oos_r_squared(a, b) + (a / b) ** 2 - 1.0) < 1e-12

    def test_reporting_convention_fixture(self):
        # output-format fixture: reproduce published-style values from
        # their defining RMSE ratios, decimals stored, formatted on output
        for r2 in (0.812, -1.817, 0.380):
            ratio = np.sqrt(1.0 - r2)
            assert oos_r_squared(ratio, 1.0) == pytest.approx(r2, abs=1e-12)


class TestAlphaTstat:
    def test_constant_nonzero_is_degenerate(self):
        with pytest.raises(NumericalError, match="degenerate residuals"):
            alpha_tstat([0.7] * 10)

    def test_antisymmetric_is_zero(self):
        assert alpha_tstat([1.0, -1.0, 1.0, -1.0]) == 0.0

    def test_direct_formula(self):
        # T=100, mean 0.2, population std 1.0 -> t = 2.0
        e = np.zeros(100)
        e[:50] = 0.2 + 1.0
        e[50:] = 0.2 - 1.0
        t = alpha_tstat(e)
        assert t == pytest.approx(2.0, abs=1e-12)
        assert is_significant(t)

    def test_reversal_invariant(self):
        rng = np.random.default_rng(5)
        e = rng.normal(size=37)
        assert alpha_tstat(e) == pytest.approx(alpha_tstat(e[::-1]), abs=1e-12)

    def test_short_series_rejected(self):
        with pytest.raises(ValueError):
            alpha_tstat([0.1])


class TestAlphaStats:
    def test_rmse_consistency(self):
        rng = np.random.default_rng(9)
        res = rng.normal(size=(6, 30))
        stats = alpha_stats_from_residuals(res)
        assert stats.rmse == pytest.approx(np.sqrt(np.mean(stats.alpha**2)), abs=1e-12)
        assert stats.alpha.shape == (6,)
        assert np.all(np.isfinite(stats.tstat))

    def test_significance_count(self):
        res = np.vstack([np.full(50, 0.0) + np.tile([1.0, -1.0], 25), np.full(50, 0.5) + np.tile([0.01, -0.01], 25)])
        stats = alpha_stats_from_residuals(res)
        assert stats.n_significant == 1
