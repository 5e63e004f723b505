"""Tests for the evaluation pipeline and report rendering."""

import numpy as np
import pytest

from deepfactors.errors import DataError
from deepfactors.evaluation import (
    EvalReport,
    count_significant,
    dissect_holdout,
    evaluate_splits,
    historical_average_baseline,
    load_table,
    render_report,
    row_label,
    significance_row,
)
from deepfactors.panel import SplitConfig, split_months
from deepfactors.simulate import SimConfig, simulate_market
from deepfactors.training import ModelArch, TrainConfig, prepare_dataset, refit_and_test, train


def trained_pair(firms=80, months=90, noise=0.04, seed=0, arch=ModelArch(1, 1), epochs=10):
    ds, truth = simulate_market(
        SimConfig(firms=firms, months=months, chars=3, macros=1, true_factors=1, noise=noise, seed=seed)
    )
    split = split_months(ds.months, SplitConfig(fractions=(0.6, 0.2)))
    ds = prepare_dataset(ds, split)
    cfg = TrainConfig(
        epochs=epochs, batch_months=24, step_size=50.0, p_keep=1.0, temp_end=0.2,
        seed=0, seeds_per_cell=1, layers_grid=(1,), factors_grid=(1,), conditions_grid=(0,),
    )
    model = train(ds, arch, "capm", cfg, split.train)
    refit, _ = refit_and_test(model, ds, cfg, split)
    return ds, truth, split, model, refit


class TestHistoricalAverage:
    def test_constant_series_zero_errors(self):
        r = np.full((3, 40), 0.01)
        base = historical_average_baseline(r, 0, range(10, 40))
        assert np.max(np.abs(base.errors)) < 1e-15
        assert base.rmse < 1e-15

    def test_never_uses_same_month(self):
        rng = np.random.default_rng(0)
        r = rng.normal(size=(4, 60))
        base = historical_average_baseline(r, 0, range(30, 60))
        r2 = r.copy()
        r2[:, 45] += 100.0  # poison one evaluated month
        base2 = historical_average_baseline(r2, 0, range(30, 60))
        # error at the poisoned month shifts by exactly the poison...
        np.testing.assert_allclose(base2.errors[:, 15], base.errors[:, 15] + 100.0, atol=1e-9)
        # ...and months before it are untouched (only later means shift)
        np.testing.assert_array_equal(base2.errors[:, :15], base.errors[:, :15])

    def test_iid_rmse_matches_linear_form_oracle(self):
        # alpha is a fixed linear form in the returns; its second moment
        # is sigma^2 * ||c||^2, computed independently from the weights
        rng = np.random.default_rng(1)
        sigma = 0.05
        t_all, start, eval_window = 120, 0, range(60, 120)
        n = 4000
        r = sigma * rng.standard_normal((n, t_all))
        base = historical_average_baseline(r, start, eval_window)
        t_e = len(eval_window)
        c = np.zeros(t_all)
        for t in eval_window:
            c[t] += 1.0 / t_e
            c[start:t] -= 1.0 / (t_e * (t - start))
        expected_sq = sigma**2 * float(c @ c)
        se = np.sqrt(2.0 / n) * expected_sq  # Gaussian chi-square s.e. of the mean
        assert abs(np.mean(base.alpha**2) - expected_sq) < 3 * se

    def test_window_validation(self):
        r = np.zeros((2, 20))
        with pytest.raises(DataError):
            historical_average_baseline(r, 0, range(0, 10))
        with pytest.raises(DataError):
            historical_average_baseline(r, 0, range(15, 25))


class TestEvaluateSplits:
    def test_perfect_model_r2_one(self):
        # zero-noise market: benchmark-only model prices everything exactly
        ds, truth = simulate_market(
            SimConfig(firms=60, months=90, chars=3, macros=1, true_factors=0, noise=0.0, seed=1, beta_spread=0.3)
        )
        split = split_months(ds.months, SplitConfig(fractions=(0.6, 0.2)))
        ds = prepare_dataset(ds, split)
        cfg = TrainConfig(epochs=2, batch_months=24, seed=0)
        model = train(ds, ModelArch(1, 0), "capm", cfg, split.train)
        refit, _ = refit_and_test(model, ds, cfg, split)
        row = evaluate_splits(model, refit, ds, split)
        assert row.ins_r2 == pytest.approx(1.0, abs=1e-10)
        assert row.vld_r2 == pytest.approx(1.0, abs=1e-8)
        assert row.test_r2 == pytest.approx(1.0, abs=1e-8)

    def test_deep_model_improves_on_benchmark(self):
        ds, truth, split, model, refit = trained_pair(firms=150, months=120, seed=3, epochs=15)
        cfg = TrainConfig(epochs=2, batch_months=24, seed=0)
        bench = train(ds, ModelArch(1, 0), "capm", cfg, split.train)
        bench_refit, _ = refit_and_test(bench, ds, cfg, split)
        row_dl = evaluate_splits(model, refit, ds, split)
        row_bench = evaluate_splits(bench, bench_refit, ds, split)
        assert row_dl.test_r2 > row_bench.test_r2
        assert row_dl.label == "CAPM+DL"
        assert row_bench.label == "CAPM"

    def test_labels(self):
        assert row_label("capm", 0, 0) == "CAPM"
        assert row_label("ff3", 2, 0) == "FF3+DL"
        assert row_label("ff4", 1, 2) == "FF4+DL+Cond"

    def test_r2_reproducible_from_stored_row(self):
        from deepfactors.core_math import oos_r_squared

        ds, truth, split, model, refit = trained_pair()
        row = evaluate_splits(model, refit, ds, split)
        assert row.vld_r2 == oos_r_squared(row.val_stats.rmse, row.vld_baseline_rmse)
        assert row.test_r2 == oos_r_squared(row.test_stats.rmse, row.test_baseline_rmse)

    def test_evaluation_does_not_mutate_model(self):
        ds, truth, split, model, refit = trained_pair()
        beta_before = model.coeffs.beta.copy()
        net_before = [w.copy() for w in model.net.weights]
        evaluate_splits(model, refit, ds, split)
        np.testing.assert_array_equal(model.coeffs.beta, beta_before)
        for a, b in zip(model.net.weights, net_before):
            np.testing.assert_array_equal(a, b)

    def test_frozen_validation_loadings(self):
        # the validation window is scored with the training-window
        # coefficients byte for byte, never a re-estimate
        ds, truth, split, model, refit = trained_pair()
        from deepfactors.training import validation_rmse

        r1 = validation_rmse(model, ds, split.validation)
        r2 = validation_rmse(model, ds, split.validation)
        assert r1 == r2


class TestCountSignificant:
    def test_spanned_anomalies_not_significant(self):
        rng = np.random.default_rng(2)
        t_all = 120
        f = 0.03 * rng.standard_normal((1, t_all))
        g = 0.04 * rng.standard_normal((1, t_all))
        x = np.vstack([f, g])
        loadings = rng.normal(size=(10, 2))
        anomalies = loadings @ x  # exactly spanned, zero alpha
        sig = count_significant(anomalies, f, g, range(0, 80), range(80, 120))
        assert sig.count == 0

    def test_strong_alpha_detected(self):
        rng = np.random.default_rng(3)
        t_all = 200
        f = 0.03 * rng.standard_normal((1, t_all))
        g = 0.04 * rng.standard_normal((1, t_all))
        anomalies = np.vstack([
            0.02 + 0.001 * rng.standard_normal(t_all),  # huge alpha, tiny noise
            (np.vstack([f, g]).T @ rng.normal(size=2)).ravel(),
        ])
        sig = count_significant(anomalies, f, g, range(0, 120), range(120, 200))
        assert sig.count == 1
        assert abs(sig.tstats[0]) > 1.96

    def test_short_series_excluded(self):
        rng = np.random.default_rng(4)
        f = 0.03 * rng.standard_normal((1, 60))
        g = 0.04 * rng.standard_normal((1, 60))
        anomalies = rng.normal(size=(2, 60)) * 0.05
        anomalies[1, 41:] = np.nan  # one usable month in the eval window
        sig = count_significant(anomalies, f, g, range(0, 40), range(40, 60))
        assert sig.excluded == [1]

    def test_matches_brute_force_recount(self):
        rng = np.random.default_rng(5)
        t_all = 150
        f = 0.03 * rng.standard_normal((2, t_all))
        g = 0.04 * rng.standard_normal((1, t_all))
        anomalies = 0.03 * rng.standard_normal((40, t_all))
        fit_w, eval_w = range(0, 100), range(100, 150)
        sig = count_significant(anomalies, f, g, fit_w, eval_w)
        x = np.vstack([f, g])
        manual = 0
        for i in range(40):
            coef = np.linalg.lstsq(x[:, list(fit_w)].T, anomalies[i, list(fit_w)], rcond=None)[0]
            e = anomalies[i, list(eval_w)] - coef @ x[:, list(eval_w)]
            tt = np.sqrt(e.size) * e.mean() / np.sqrt(np.mean((e - e.mean()) ** 2))
            manual += int(abs(tt) > 1.96)
        assert sig.count == manual

    def test_pure_noise_false_positive_rate(self):
        # |t| > 1.96 on pure noise should fire at roughly the 5% level
        total, trials = 0, 0
        for seed in range(6):
            rng = np.random.default_rng(100 + seed)
            t_all = 516
            f = 0.03 * rng.standard_normal((1, t_all))
            g = 0.04 * rng.standard_normal((1, t_all))
            anomalies = 0.05 * rng.standard_normal((200, t_all))
            sig = count_significant(anomalies, f, g, range(0, 432), range(432, 516))
            total += sig.count
            trials += 200
        rate = total / trials
        band = 3 * np.sqrt(0.05 * 0.95 / trials)
        assert abs(rate - 0.05) < band + 0.01


class TestDissect:
    def test_holdout_identical_to_training_portfolios(self):
        ds, truth, split, model, refit = trained_pair()
        row = dissect_holdout(model, refit, ds, split, ds.portfolios, set_name="same")
        assert row.overlap_warning
        base = evaluate_splits(model, refit, ds, split)
        # same assets, loadings re-estimated by OLS: test R2 matches the
        # standard evaluation up to the coefficient-refit path
        assert row.test_r2 == pytest.approx(base.test_r2, abs=0.05)

    def test_orthogonal_holdout_gets_no_help(self):
        ds, truth, split, model, refit = trained_pair(seed=6)
        rng = np.random.default_rng(7)
        noise = 0.05 * rng.standard_normal((ds.n_months, 10))
        row = dissect_holdout(model, refit, ds, split, noise, set_name="noise")
        assert not row.overlap_warning
        assert row.test_r2 < 0.5  # factors cannot price unrelated noise

    def test_simulator_holdout_grids(self):
        ds, truth, split, model, refit = trained_pair(seed=8)
        row = dissect_holdout(model, refit, ds, split, truth.holdout_returns, set_name="undriven-grids")
        assert np.isfinite(row.vld_r2) and np.isfinite(row.test_r2)


class TestRenderReport:
    def test_empty_report_headers_only(self, tmp_path):
        paths = render_report(EvalReport(), tmp_path)
        assert (tmp_path / "table_oos.csv").read_text().startswith("model,")
        header, rows = load_table(paths["table_oos"])
        assert rows == []

    def test_csv_round_trip(self, tmp_path):
        ds, truth, split, model, refit = trained_pair()
        row = evaluate_splits(model, refit, ds, split)
        report = EvalReport(rows=[row], loss_curves={row.label: model.loss_curve},
                            benchmark_losses={"capm": 0.00123456789012345})
        paths = render_report(report, tmp_path)
        header, rows = load_table(paths["table_oos"])
        assert header == ["model", "ins_r2", "vld_r2", "test_r2"]
        assert rows[0][0] == row.label
        assert rows[0][1] == row.ins_r2  # exact float round trip
        assert rows[0][2] == row.vld_r2
        curves_header, curve_rows = load_table(paths["loss_curves"])
        assert curves_header[-1] == "capm_ols"
        assert all(r[-1] == 0.00123456789012345 for r in curve_rows)

    def test_benchmark_reference_lines_constant(self, tmp_path):
        report = EvalReport(
            loss_curves={"CAPM+DL": np.array([3.0, 2.0, 1.5])},
            benchmark_losses={"capm": 2.5, "ff3": 2.0},
        )
        paths = render_report(report, tmp_path)
        _, rows = load_table(paths["loss_curves"])
        assert [r[0] for r in rows] == [1.0, 2.0, 3.0]
        assert all(r[2] == 2.5 and r[3] == 2.0 for r in rows)

    def test_deterministic_bytes(self, tmp_path):
        ds, truth, split, model, refit = trained_pair()
        row = evaluate_splits(model, refit, ds, split)
        report = EvalReport(rows=[row], metadata={"seed": 0})
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        render_report(report, d1)
        render_report(report, d2)
        for name in ("table_oos.csv", "summary.txt", "loss_curves.csv"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_significance_row_runs(self, tmp_path):
        ds, truth, split, model, refit = trained_pair()
        rng = np.random.default_rng(11)
        anomalies = 0.05 * rng.standard_normal((20, ds.n_months))
        row = significance_row(model, refit, ds, split, anomalies)
        assert row.n_anomalies == 20
        assert 0 <= row.test_sig <= 20
        report = EvalReport(sig_rows=[row])
        paths = render_report(report, tmp_path)
        header, rows = load_table(paths["table_sig"])
        assert rows[0][1] == row.ins_sig
