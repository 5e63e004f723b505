"""Tests for the ReLU-pair conditional head and its region unwrapping."""

import numpy as np
import pytest

from deepfactors.conditional import (
    ConditionSpec,
    ConditionalHead,
    region_index,
    relu_pairs_forward,
    unwrap_regions,
)


def random_setup(rng, n_pairs, n_deep=2, n_benchmark=1, n_assets=4):
    spec = ConditionSpec(
        directions=rng.normal(size=(n_pairs, n_deep + n_benchmark)),
        n_deep=n_deep,
        n_benchmark=n_benchmark,
    )
    head = ConditionalHead(
        beta_plus=rng.normal(size=(n_assets, n_pairs)),
        beta_minus=rng.normal(size=(n_assets, n_pairs)),
    )
    return spec, head


class TestForward:
    def test_up_down_market_slopes(self):
        # one pair on a single market factor: slope b+ when g > 0, -b- when g < 0
        spec = ConditionSpec(directions=np.array([[1.0]]), n_deep=0, n_benchmark=1)
        head = ConditionalHead(beta_plus=np.array([[1.3]]), beta_minus=np.array([[0.7]]))
        up = relu_pairs_forward(np.zeros(0), np.array([0.05]), spec, head)
        down = relu_pairs_forward(np.zeros(0), np.array([-0.05]), spec, head)
        assert up[0] == pytest.approx(1.3 * 0.05, abs=1e-15)
        assert down[0] == pytest.approx(-0.7 * -0.05, abs=1e-15)

    def test_zero_input_zero_prediction(self):
        rng = np.random.default_rng(0)
        spec, head = random_setup(rng, n_pairs=3)
        out = relu_pairs_forward(np.zeros(2), np.zeros(1), spec, head)
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_batch_matches_per_month(self):
        rng = np.random.default_rng(1)
        spec, head = random_setup(rng, n_pairs=2)
        f = rng.normal(size=(2, 9))
        g = rng.normal(size=(1, 9))
        batch = relu_pairs_forward(f, g, spec, head)
        for t in range(9):
            np.testing.assert_allclose(batch[:, t], relu_pairs_forward(f[:, t], g[:, t], spec, head), atol=1e-14)


class TestRegions:
    def test_all_positive_is_last_region(self):
        rng = np.random.default_rng(2)
        spec, _ = random_setup(rng, n_pairs=3)
        x = 10.0 * np.ones(3)
        # craft a point with all projections positive
        point = np.linalg.lstsq(spec.directions, x, rcond=None)[0]
        if np.all(spec.directions @ point > 0):
            q = region_index(point[:2], point[2:], spec)
            assert q == 8

    def test_negation_flips_every_bit(self):
        rng = np.random.default_rng(3)
        spec, _ = random_setup(rng, n_pairs=3)
        for _ in range(100):
            f = rng.normal(size=2)
            g = rng.normal(size=1)
            if np.any(spec.directions @ np.concatenate([f, g]) == 0.0):
                continue
            q = region_index(f, g, spec)
            q_neg = region_index(-f, -g, spec)
            assert (q - 1) ^ (q_neg - 1) == 0b111

    def test_single_pair_two_regions(self):
        spec = ConditionSpec(directions=np.array([[1.0, 0.0]]), n_deep=1, n_benchmark=1)
        assert region_index(np.array([2.0]), np.array([0.0]), spec) == 2
        assert region_index(np.array([-2.0]), np.array([0.0]), spec) == 1

    def test_boundary_goes_positive(self):
        spec = ConditionSpec(directions=np.array([[1.0]]), n_deep=1, n_benchmark=0)
        assert region_index(np.array([0.0]), np.zeros(0), spec) == 2

    def test_region_frequencies_roughly_uniform(self):
        rng = np.random.default_rng(4)
        # orthogonal directions -> independent sign bits -> uniform regions
        q_mat, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        spec = ConditionSpec(directions=q_mat, n_deep=2, n_benchmark=1)
        x = rng.standard_normal(size=(3, 20000))
        q = region_index(x[:2], x[2:], spec)
        counts = np.bincount(q - 1, minlength=8)
        expected = 20000 / 8
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        assert chi2 < 24.3  # chi-square(7) at 0.1%


class TestUnwrap:
    def test_single_pair_slopes(self):
        spec = ConditionSpec(directions=np.array([[2.0, -1.0]]), n_deep=1, n_benchmark=1)
        head = ConditionalHead(beta_plus=np.array([[0.5]]), beta_minus=np.array([[0.25]]))
        coeffs = unwrap_regions(spec, head)
        assert coeffs.coefficients.shape == (2, 1, 2)
        np.testing.assert_allclose(coeffs.region_coeffs(2)[0], 0.5 * np.array([2.0, -1.0]))
        np.testing.assert_allclose(coeffs.region_coeffs(1)[0], -0.25 * np.array([2.0, -1.0]))

    def test_two_pairs_four_regions(self):
        rng = np.random.default_rng(5)
        spec, head = random_setup(rng, n_pairs=2)
        coeffs = unwrap_regions(spec, head)
        assert coeffs.coefficients.shape[0] == 4
        assert coeffs.sign_patterns.shape == (4, 2)

    @pytest.mark.parametrize("n_pairs", [1, 2, 3])
    def test_pointwise_equivalence(self, n_pairs):
        rng = np.random.default_rng(6 + n_pairs)
        spec, head = random_setup(rng, n_pairs=n_pairs)
        coeffs = unwrap_regions(spec, head)
        f = rng.normal(size=(2, 1000))
        g = rng.normal(size=(1, 1000))
        direct = relu_pairs_forward(f, g, spec, head)
        unwrapped = coeffs.predict(f, g, spec)
        np.testing.assert_allclose(direct, unwrapped, atol=1e-12)

    def test_continuity_across_boundary(self):
        rng = np.random.default_rng(9)
        spec, head = random_setup(rng, n_pairs=2)
        # approach the first hyperplane from both sides along its normal
        a = spec.directions[0]
        base = rng.normal(size=3)
        base -= a * (a @ base) / (a @ a)  # project onto the hyperplane
        eps = 1e-9
        up = relu_pairs_forward(*np.split(base + eps * a, [2]), spec, head)
        down = relu_pairs_forward(*np.split(base - eps * a, [2]), spec, head)
        np.testing.assert_allclose(up, down, atol=1e-7)

    def test_gradient_matches_finite_differences_off_hyperplanes(self):
        rng = np.random.default_rng(10)
        spec, head = random_setup(rng, n_pairs=2)
        coeffs = unwrap_regions(spec, head)
        f = rng.normal(size=2)
        g = rng.normal(size=1)
        x = np.concatenate([f, g])
        q = region_index(f, g, spec)
        jac = coeffs.region_coeffs(q)  # (N, 3) analytic d pred / d x
        h = 1e-6
        for k in range(3):
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            up = relu_pairs_forward(xp[:2], xp[2:], spec, head)
            dn = relu_pairs_forward(xm[:2], xm[2:], spec, head)
            fd = (up - dn) / (2 * h)
            np.testing.assert_allclose(jac[:, k], fd, rtol=1e-4, atol=1e-8)
