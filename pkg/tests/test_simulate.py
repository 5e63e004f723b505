"""Tests for the synthetic market generator."""

import numpy as np
import pytest

from deepfactors.core_math import alpha_rmse
from deepfactors.errors import DataError
from deepfactors.pricing import fit_ols, predict_returns
from deepfactors.simulate import SimConfig, simulate_market


class TestDeterminism:
    def test_same_seed_identical(self):
        config = SimConfig(firms=40, months=48, chars=3, macros=2, seed=7)
        ds1, truth1 = simulate_market(config)
        ds2, truth2 = simulate_market(config)
        np.testing.assert_array_equal(ds1.returns, ds2.returns)
        np.testing.assert_array_equal(ds1.characteristics, ds2.characteristics)
        np.testing.assert_array_equal(truth1.factor_returns, truth2.factor_returns)

    def test_seed_override(self):
        config = SimConfig(firms=40, months=48, chars=3, macros=2, seed=7)
        ds1, _ = simulate_market(config, seed=8)
        ds2, _ = simulate_market(config)
        assert not np.array_equal(ds1.returns, ds2.returns)


class TestStructure:
    def test_shapes_and_positivity(self):
        config = SimConfig(firms=60, months=36, chars=4, macros=2, true_factors=2)
        ds, truth = simulate_market(config)
        assert ds.returns.shape == (36, 60)
        assert ds.characteristics.shape == (4, 36, 60)
        assert ds.portfolios.shape == (36, 50)  # one 5x5 grid per planted factor
        assert ds.factors.shape[1] == 4
        assert np.all(ds.market_equity > 0)
        assert truth.loadings.shape == (2, 60)
        assert truth.holdout_returns.shape == (36, 25)

    def test_bad_dimensions_rejected(self):
        with pytest.raises(DataError):
            SimConfig(firms=0)
        with pytest.raises(DataError):
            SimConfig(chars=1)
        with pytest.raises(DataError):
            SimConfig(true_factors=5, chars=3)

    def test_config_file_round_trip(self, tmp_path):
        config = SimConfig(firms=77, months=90, noise=0.03, factor_sharpe=1.1)
        path = tmp_path / "sim.cfg"
        config.to_file(path)
        assert SimConfig.from_file(path) == config

    def test_config_file_errors(self, tmp_path):
        path = tmp_path / "sim.cfg"
        path.write_text("firms 10 20\n")
        with pytest.raises(DataError):
            SimConfig.from_file(path)
        path.write_text("bogus_key 3\n")
        with pytest.raises(DataError):
            SimConfig.from_file(path)


class TestPlantedStructure:
    def test_zero_noise_exact_spanning(self):
        config = SimConfig(firms=100, months=120, chars=4, macros=1, true_factors=1, noise=0.0)
        ds, truth = simulate_market(config)
        x_f = truth.factor_returns.T  # (1, T)
        x_g = truth.market[None, :]
        coeffs = fit_ols(ds.portfolios.T, x_f, x_g)
        resid = ds.portfolios.T - predict_returns(x_f, x_g, coeffs)
        assert alpha_rmse(resid.mean(axis=1)) < 1e-10
        assert np.max(np.abs(resid)) < 1e-9

    def test_zero_noise_spanning_two_factors(self):
        config = SimConfig(firms=100, months=120, chars=5, macros=1, true_factors=2, noise=0.0)
        ds, truth = simulate_market(config)
        coeffs = fit_ols(ds.portfolios.T, truth.factor_returns.T, truth.market[None, :])
        resid = ds.portfolios.T - predict_returns(truth.factor_returns.T, truth.market[None, :], coeffs)
        assert np.max(np.abs(resid)) < 1e-9

    def test_factor_moments_match_config(self):
        config = SimConfig(firms=40, months=600, chars=3, macros=1, true_factors=1, seed=3)
        _, truth = simulate_market(config)
        f = truth.factor_returns[:, 0]
        t_len = f.size
        target_mu = config.factor_sharpe / np.sqrt(12) * config.factor_vol
        se_mu = config.factor_vol / np.sqrt(t_len)
        assert abs(f.mean() - target_mu) < 3 * se_mu
        se_vol = config.factor_vol / np.sqrt(2 * (t_len - 1))
        assert abs(f.std(ddof=1) - config.factor_vol) < 3 * se_vol

    def test_sorting_on_planted_char_recovers_factor(self):
        # value-weighted long-short on characteristic 1 must track factor 1
        from deepfactors.sorting import SortSpec, sort_hard, long_short_weights

        config = SimConfig(firms=200, months=240, chars=4, macros=2, true_factors=1, seed=5)
        ds, truth = simulate_market(config)
        spec = SortSpec(tau=0.8)
        series = np.empty(240)
        for t in range(240):
            u = sort_hard(ds.characteristics[0, t], spec)
            series[t] = long_short_weights(u, ds.market_equity[t]) @ ds.returns[t]
        rho = np.corrcoef(series, truth.factor_returns[:, 0])[0, 1]
        assert rho > 0.9

    def test_benchmark_styles_do_not_load_planted_factor(self):
        config = SimConfig(firms=150, months=300, chars=4, macros=1, true_factors=1, seed=11)
        ds, truth = simulate_market(config)
        for d in range(1, ds.factors.shape[1]):
            rho = np.corrcoef(ds.factors[:, d], truth.factor_returns[:, 0])[0, 1]
            assert abs(rho) < 0.25
