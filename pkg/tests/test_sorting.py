"""Tests for quantile sorting, long-short weights, and factor returns."""

import numpy as np
import pytest

from deepfactors.core_math import rank_ascending
from deepfactors.errors import DegenerateCrossSectionError, EmptyLegError
from deepfactors.sorting import (
    SortSpec,
    factor_return,
    factor_return_vjp,
    factor_return_with_aux,
    leg_size,
    leg_thresholds,
    sort_hard,
    sort_soft,
    long_short_weights,
)


def oracle_sort(y, tau, mask=None):
    """Brute-force membership via independent ranking."""
    y = np.asarray(y, dtype=float)
    mask = np.ones(y.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask)
    m = idx.size
    n = int(np.floor((1.0 - tau) * m + 0.5))
    n = max(1, min(n, m // 2))
    ranks = rank_ascending(y[idx])
    u = np.zeros(y.size, dtype=np.int64)
    u[idx[ranks <= n]] = -1
    u[idx[ranks >= m - n + 1]] = 1
    return u


class TestSortHard:
    def test_hand_ranked_example(self):
        u = sort_hard([0.5, -1.2, 3.0, 0.1, 2.2], SortSpec(tau=0.8))
        assert u.tolist() == [0, -1, 1, 0, 0]

    def test_top_bottom_20_percent(self):
        rng = np.random.default_rng(0)
        u = sort_hard(rng.normal(size=10), SortSpec(tau=0.8))
        assert np.sum(u == 1) == 2 and np.sum(u == -1) == 2

    def test_masked_firms_excluded(self):
        y = np.array([9.0, 1.0, 5.0, 3.0, 7.0, 2.0])
        mask = np.array([False, True, False, True, False, True])
        u = sort_hard(y, SortSpec(tau=0.8), mask)
        assert u[~mask].tolist() == [0, 0, 0]
        assert u[1] == -1 and u[3] == 1  # among eligible {1.0, 3.0, 2.0}

    def test_degenerate_cross_section(self):
        with pytest.raises(DegenerateCrossSectionError):
            sort_hard([1.0], SortSpec())
        with pytest.raises(DegenerateCrossSectionError):
            sort_hard([1.0, 2.0, 3.0], SortSpec(), mask=[True, False, False])

    def test_matches_rank_oracle_randomized(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            m = int(rng.integers(5, 501))
            y = rng.normal(size=m)
            if rng.random() < 0.5:
                y = np.round(y, 1)  # inject ties
            mask = rng.random(m) > 0.2
            if mask.sum() < 2:
                continue
            tau = float(rng.uniform(0.5, 0.99))
            spec = SortSpec(tau=tau)
            np.testing.assert_array_equal(sort_hard(y, spec, mask), oracle_sort(y, tau, mask))

    def test_monotone_invariance(self):
        rng = np.random.default_rng(13)
        spec = SortSpec(tau=0.8)
        transforms = [np.exp, np.arctan, lambda x: x**3 + 5 * x, lambda x: 3 * x - 2]
        for _ in range(50):
            y = rng.normal(size=40)
            base = sort_hard(y, spec)
            for phi in transforms:
                np.testing.assert_array_equal(sort_hard(phi(y), spec), base)

    def test_fully_masked_extra_firm_changes_nothing(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=20)
        spec = SortSpec(tau=0.8)
        u = sort_hard(y, spec)
        y2 = np.append(y, 99.0)
        mask2 = np.append(np.ones(20, dtype=bool), False)
        u2 = sort_hard(y2, spec, mask2)
        np.testing.assert_array_equal(u2[:20], u)
        assert u2[20] == 0

    def test_leg_cardinality_property(self):
        rng = np.random.default_rng(77)
        for _ in range(200):
            m = int(rng.integers(2, 300))
            tau = float(rng.uniform(0.5, 0.99))
            y = rng.normal(size=m)
            u = sort_hard(y, SortSpec(tau=tau))
            n = leg_size(m, tau)
            assert np.sum(u == 1) == n and np.sum(u == -1) == n


class TestSortSoft:
    def test_converges_to_hard(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            y = rng.normal(size=int(rng.integers(5, 80)))
            if np.unique(y).size < y.size:
                continue
            spec = SortSpec(tau=0.8, temperature=1e-6, mode="soft")
            u_soft, _ = sort_soft(y, spec)
            u_hard = sort_hard(y, spec)
            assert np.max(np.abs(u_soft - u_hard)) < 1e-3

    def test_midpoint_value_at_threshold(self):
        y = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
        spec = SortSpec(tau=0.8, temperature=0.5, mode="soft")
        _, c_hi = leg_thresholds(y, spec)
        y2 = y.copy()
        y2[2] = c_hi  # park a firm exactly on the long threshold
        u, _ = sort_soft(y2, spec)
        long_side = 0.5 * (1.0 + np.tanh(0.5 * (y2[2] - c_hi) / 0.5))
        assert long_side == pytest.approx(0.5)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        spec = SortSpec(tau=0.8, temperature=0.3, mode="soft")
        y = rng.normal(size=25)
        u0, jac = sort_soft(y, spec)
        c_lo, c_hi = leg_thresholds(y, spec)
        h = 1e-6
        for j in range(y.size):
            # thresholds are gradient-blocked constants: recompute u with
            # the original cut points
            def u_at(yj):
                z = (yj - c_hi) / spec.temperature
                w = (c_lo - yj) / spec.temperature
                return 0.5 * (1 + np.tanh(0.5 * z)) - 0.5 * (1 + np.tanh(0.5 * w))

            fd = (u_at(y[j] + h) - u_at(y[j] - h)) / (2 * h)
            assert jac[j] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_masked_entries_zero(self):
        y = np.arange(6.0)
        mask = np.array([True, True, False, True, True, True])
        u, jac = sort_soft(y, SortSpec(tau=0.8, temperature=0.5, mode="soft"), mask)
        assert u[2] == 0.0 and jac[2] == 0.0


class TestWeights:
    def test_hand_example(self):
        w = long_short_weights(np.array([1, 0, -1, 1]), np.array([2.0, 1.0, 1.0, 2.0]))
        np.testing.assert_allclose(w, [0.5, 0.0, -1.0, 0.5], atol=1e-15)

    def test_equal_equity_equal_weights(self):
        w = long_short_weights(np.array([1, 1, 0, -1, -1]), np.ones(5))
        np.testing.assert_allclose(w, [0.5, 0.5, 0.0, -0.5, -0.5], atol=1e-15)

    def test_leg_sums_random(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            m = int(rng.integers(4, 200))
            u = sort_hard(rng.normal(size=m), SortSpec(tau=float(rng.uniform(0.5, 0.95))))
            v = rng.lognormal(sigma=1.0, size=m)
            w = long_short_weights(u, v)
            assert abs(w[w > 0].sum() - 1.0) < 1e-12
            assert abs(w[w < 0].sum() + 1.0) < 1e-12
            assert abs(w.sum()) < 1e-12
            assert np.all(w[u == 0] == 0.0)

    def test_soft_membership_leg_sums(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            y = rng.normal(size=30)
            u, _ = sort_soft(y, SortSpec(tau=0.8, temperature=0.7, mode="soft"))
            v = rng.lognormal(size=30)
            w = long_short_weights(u, v)
            assert abs(w[w > 0].sum() - 1.0) < 1e-12
            assert abs(w[w < 0].sum() + 1.0) < 1e-12

    def test_empty_leg_raises(self):
        with pytest.raises(EmptyLegError, match="short"):
            long_short_weights(np.array([1.0, 0.0, 1.0]), np.ones(3))
        with pytest.raises(EmptyLegError, match="long"):
            long_short_weights(np.array([-1.0, 0.0, -1.0]), np.ones(3))

    def test_nonpositive_equity_rejected(self):
        with pytest.raises(ValueError, match="market equity"):
            long_short_weights(np.array([1.0, -1.0]), np.array([1.0, 0.0]))


class TestFactorReturn:
    def test_hand_computation(self):
        w = np.array([0.5, 0.0, -1.0, 0.5])
        r = np.array([0.02, 0.01, 0.03, 0.04])
        assert factor_return(w, r) == pytest.approx(0.0, abs=1e-15)

    def test_zero_returns(self):
        assert factor_return(np.array([[0.5, -0.5]]), np.zeros(2)).tolist() == [0.0]

    def test_uniform_shift_invariance(self):
        rng = np.random.default_rng(10)
        for _ in range(1000):
            m = int(rng.integers(4, 100))
            u = sort_hard(rng.normal(size=m), SortSpec(tau=0.8))
            v = rng.lognormal(size=m)
            w = long_short_weights(u, v)
            r = rng.normal(scale=0.05, size=m)
            c = float(rng.normal())
            f0 = factor_return(w, r)
            f1 = factor_return(w, r + c)
            assert f1 == pytest.approx(f0, abs=5e-13 * max(1.0, abs(c)))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            factor_return(np.ones((2, 3)), np.ones(4))


class TestFactorReturnBackward:
    def test_aux_matches_direct(self):
        rng = np.random.default_rng(2)
        y = rng.normal(size=40)
        u, _ = sort_soft(y, SortSpec(tau=0.8, temperature=0.5, mode="soft"))
        v = rng.lognormal(size=40)
        r = rng.normal(scale=0.05, size=40)
        f, aux = factor_return_with_aux(u, v, r)
        assert f == pytest.approx(float(long_short_weights(u, v) @ r), abs=1e-12)

    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        y = rng.normal(size=30)
        u, _ = sort_soft(y, SortSpec(tau=0.8, temperature=0.5, mode="soft"))
        v = rng.lognormal(size=30)
        r = rng.normal(scale=0.05, size=30)
        _, aux = factor_return_with_aux(u, v, r)
        du = factor_return_vjp(1.0, u, v, r, aux)
        h = 1e-7
        for j in range(u.size):
            up, um = u.copy(), u.copy()
            up[j] += h
            um[j] -= h
            fp, _ = factor_return_with_aux(up, v, r)
            fm, _ = factor_return_with_aux(um, v, r)
            assert du[j] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-8)
