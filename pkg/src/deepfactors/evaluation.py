"""Out-of-sample evaluation and report rendering.

Everything out of sample is scored against the expanding historical
average, the strongest simple benchmark: the prediction for month t is
the mean portfolio return from the first training month through t-1, so
no same-month information ever enters.  Out-of-sample R-squared is
``1 - rmse_model^2 / rmse_average^2`` on the window's pricing errors and
is negative whenever the model does worse than the mean.

The in-sample column uses the standard panel R-squared (1 - SSE/SST
about the grand mean); it is not comparable to the out-of-sample
convention and is reported only as a fit diagnostic.

Report files written by :func:`render_report`:

* ``summary.txt``       human-readable overview
* ``table_oos.csv``     per-model INS/VLD/Test R-squared
* ``table_sig.csv``     significant-alpha counts per window
* ``table_dissect.csv`` holdout-portfolio R-squared
* ``loss_curves.csv``   per-epoch training losses plus flat least-squares
  reference lines for the benchmark models
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import (
    SIGNIFICANCE_THRESHOLD,
    AlphaStats,
    alpha_rmse,
    alpha_stats_from_residuals,
    alpha_tstat,
    oos_r_squared,
)
from .errors import DataError
from .panel import PanelDataset, SampleSplit
from .training import TrainedModel, materialize_factors

__all__ = [
    "BaselineResult",
    "DissectRow",
    "EvalReport",
    "EvalRow",
    "SigRow",
    "count_significant",
    "dissect_holdout",
    "evaluate_splits",
    "historical_average_baseline",
    "load_table",
    "render_report",
    "row_label",
]


# ---------------------------------------------------------------------------
# Historical-average benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaselineResult:
    alpha: np.ndarray  # (N,) mean pricing error of the expanding mean
    rmse: float
    errors: np.ndarray  # (N, T_eval)


def historical_average_baseline(returns, train_start: int, eval_window: range) -> BaselineResult:
    """Expanding-mean forecaster: predict month t by the mean over [start, t).

    ``returns`` is the full (N, T) panel; the expanding window opens at
    ``train_start`` and the first evaluated month must lie strictly after
    it so at least one month of history exists.
    """
    r = np.asarray(returns, dtype=float)
    if r.ndim != 2:
        raise ValueError(f"returns must be (N, T), got {r.shape}")
    if len(eval_window) == 0:
        raise DataError("empty evaluation window")
    if eval_window.start <= train_start:
        raise DataError("evaluation window must start after the first training month")
    if eval_window.stop > r.shape[1]:
        raise DataError("evaluation window runs past the panel")
    cum = np.cumsum(r, axis=1)
    errors = np.empty((r.shape[0], len(eval_window)))
    for col, t in enumerate(eval_window):
        hist_sum = cum[:, t - 1] - (cum[:, train_start - 1] if train_start > 0 else 0.0)
        mean = hist_sum / (t - train_start)
        errors[:, col] = r[:, t] - mean
    alpha = errors.mean(axis=1)
    return BaselineResult(alpha=alpha, rmse=alpha_rmse(alpha), errors=errors)


# ---------------------------------------------------------------------------
# Split evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalRow:
    """One model's INS/VLD/Test scores with the underlying alpha vectors.

    The baseline RMSEs are stored alongside so the out-of-sample
    R-squared values can be reproduced from the row alone.
    """

    label: str
    ins_r2: float
    vld_r2: float
    test_r2: float
    train_stats: AlphaStats
    val_stats: AlphaStats
    test_stats: AlphaStats
    vld_baseline_rmse: float = float("nan")
    test_baseline_rmse: float = float("nan")
    arch: tuple[int, int, int] = (0, 0, 0)


def row_label(benchmark: str, factors: int, conditions: int) -> str:
    label = benchmark.upper()
    if factors > 0:
        label += "+DL"
    if conditions > 0:
        label += "+Cond"
    return label


def _model_window(model: TrainedModel, dataset: PanelDataset, window: range, purpose: str):
    """Factors, benchmark returns, and portfolio returns over a window."""
    n_benchmark = dataset.benchmark_count(model.benchmark)
    r = dataset.portfolios[window.start: window.stop].T
    g = dataset.factors[window.start: window.stop, :n_benchmark].T
    if model.n_deep:
        view = dataset.view(window, purpose=purpose, benchmark=model.benchmark)
        f = materialize_factors(model.net, model.sort_spec, view, model.warnings)
    else:
        f = np.zeros((0, len(window)))
    return f, g, r


def evaluate_splits(
    model: TrainedModel,
    refit: TrainedModel,
    dataset: PanelDataset,
    split: SampleSplit,
    label: str | None = None,
) -> EvalRow:
    """Score one model across the three windows.

    ``model`` is the training-window fit (its loadings stay frozen for
    the validation window); ``refit`` is the train+validation re-fit used
    once on the test window.
    """
    f_tr, g_tr, r_tr = _model_window(model, dataset, split.train, "evaluate-train")
    pred_tr = model.predict(f_tr, g_tr)
    resid_tr = r_tr - pred_tr
    sse = float(np.sum(resid_tr**2))
    sst = float(np.sum((r_tr - r_tr.mean()) ** 2))
    ins_r2 = 1.0 - sse / sst if sst > 0 else float("nan")
    train_stats = alpha_stats_from_residuals(resid_tr)

    f_va, g_va, r_va = _model_window(model, dataset, split.validation, "evaluate-validation")
    val_stats = alpha_stats_from_residuals(r_va - model.predict(f_va, g_va))
    base_va = historical_average_baseline(dataset.portfolios.T, split.train.start, split.validation)
    vld_r2 = oos_r_squared(val_stats.rmse, base_va.rmse)

    f_te, g_te, r_te = _model_window(refit, dataset, split.test, "evaluate-test")
    test_stats = alpha_stats_from_residuals(r_te - refit.predict(f_te, g_te))
    base_te = historical_average_baseline(dataset.portfolios.T, split.train.start, split.test)
    test_r2 = oos_r_squared(test_stats.rmse, base_te.rmse)

    arch = (model.arch.layers, model.arch.factors, model.arch.conditions)
    if label is None:
        label = row_label(model.benchmark, model.arch.factors, model.arch.conditions)
    return EvalRow(
        label=label,
        ins_r2=ins_r2,
        vld_r2=vld_r2,
        test_r2=test_r2,
        train_stats=train_stats,
        val_stats=val_stats,
        test_stats=test_stats,
        vld_baseline_rmse=base_va.rmse,
        test_baseline_rmse=base_te.rmse,
        arch=arch,
    )


# ---------------------------------------------------------------------------
# Alpha-significance counting on external anomaly series
# ---------------------------------------------------------------------------


@dataclass
class SigCount:
    count: int
    tstats: np.ndarray
    excluded: list[int]


def count_significant(
    anomalies,
    f,
    g,
    fit_window: range,
    eval_window: range,
) -> SigCount:
    """Count anomalies whose pricing error stays significant out of sample.

    Loadings come from a no-intercept regression over ``fit_window``;
    the t-statistic of the residual series over ``eval_window`` decides
    significance at |t| > 1.96.  Anomalies with fewer than two usable
    months are excluded and reported.
    """
    a = np.asarray(anomalies, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"anomalies must be (N_a, T), got {a.shape}")
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    x = np.vstack([f, g]) if f.size else g
    fit_cols = np.asarray(fit_window)
    eval_cols = np.asarray(eval_window)
    tstats = np.full(a.shape[0], np.nan)
    excluded: list[int] = []
    count = 0
    for i in range(a.shape[0]):
        row = a[i]
        fit_ok = fit_cols[np.isfinite(row[fit_cols])]
        eval_ok = eval_cols[np.isfinite(row[eval_cols])]
        if eval_ok.size < 2 or fit_ok.size <= x.shape[0]:
            excluded.append(i)
            continue
        coef, *_ = np.linalg.lstsq(x[:, fit_ok].T, row[fit_ok], rcond=None)
        resid = row[eval_ok] - coef @ x[:, eval_ok]
        t = alpha_tstat(resid)
        tstats[i] = t
        if abs(t) > SIGNIFICANCE_THRESHOLD:
            count += 1
    return SigCount(count=count, tstats=tstats, excluded=excluded)


@dataclass
class SigRow:
    label: str
    ins_sig: int
    vld_sig: int
    test_sig: int
    n_anomalies: int
    n_excluded: int


def significance_row(
    model: TrainedModel,
    refit: TrainedModel,
    dataset: PanelDataset,
    split: SampleSplit,
    anomalies,
    label: str | None = None,
) -> SigRow:
    """INS/VLD/Test significance counts for one model over an anomaly panel."""
    f_tr, g_tr, _ = _model_window(model, dataset, split.train, "sig-train")
    f_va, g_va, _ = _model_window(model, dataset, split.validation, "sig-validation")
    f_te, g_te, _ = _model_window(refit, dataset, split.test, "sig-test")
    a = np.asarray(anomalies, dtype=float)

    def windowed(fa, ga, window):
        full_f = np.zeros((fa.shape[0], a.shape[1]))
        full_g = np.zeros((ga.shape[0], a.shape[1]))
        full_f[:, window.start: window.stop] = fa
        full_g[:, window.start: window.stop] = ga
        return full_f, full_g

    # factors live only on their window; fit and eval columns never leave it
    ins_f, ins_g = windowed(f_tr, g_tr, split.train)
    ins = count_significant(a, ins_f, ins_g, split.train, split.train)
    va_f, va_g = windowed(np.hstack([f_tr, f_va]), np.hstack([g_tr, g_va]), split.train_and_validation)
    vld = count_significant(a, va_f, va_g, split.train, split.validation)
    # the test row fits loadings on train+validation with the refit model's factors
    f_tr2, g_tr2, _ = _model_window(refit, dataset, split.train, "sig-train")
    f_va2, g_va2, _ = _model_window(refit, dataset, split.validation, "sig-validation")
    te_f, te_g = windowed(
        np.hstack([f_tr2, f_va2, f_te]),
        np.hstack([g_tr2, g_va2, g_te]),
        range(split.train.start, split.test.stop),
    )
    test = count_significant(a, te_f, te_g, split.train_and_validation, split.test)
    if label is None:
        label = row_label(model.benchmark, model.arch.factors, model.arch.conditions)
    return SigRow(
        label=label,
        ins_sig=ins.count,
        vld_sig=vld.count,
        test_sig=test.count,
        n_anomalies=a.shape[0],
        n_excluded=len(set(ins.excluded) | set(vld.excluded) | set(test.excluded)),
    )


# ---------------------------------------------------------------------------
# Holdout dissection
# ---------------------------------------------------------------------------


@dataclass
class DissectRow:
    label: str
    set_name: str
    vld_r2: float
    test_r2: float
    overlap_warning: bool = False


def dissect_holdout(
    model: TrainedModel,
    refit: TrainedModel,
    dataset: PanelDataset,
    split: SampleSplit,
    holdout,
    set_name: str = "holdout",
    label: str | None = None,
) -> DissectRow:
    """Out-of-sample pricing of portfolios the model never trained on.

    The model itself stays frozen; only the holdout portfolios' loadings
    are re-estimated by least squares on pre-evaluation data (training
    window for VLD, train+validation for Test).
    """
    h = np.asarray(holdout, dtype=float)
    if h.ndim != 2 or h.shape[0] != dataset.n_months:
        raise ValueError(f"holdout must be (T, N_h) aligned to the dataset, got {h.shape}")
    overlap = False
    for col in h.T:
        if np.any(np.all(np.isclose(col[:, None], dataset.portfolios), axis=0)):
            overlap = True
            break
    h = h.T  # (N_h, T)

    f_tr, g_tr, _ = _model_window(model, dataset, split.train, "dissect-train")
    f_va, g_va, _ = _model_window(model, dataset, split.validation, "dissect-validation")
    f_te, g_te, _ = _model_window(refit, dataset, split.test, "dissect-test")

    def window_r2(x_fit, h_fit, x_eval, h_eval, eval_window):
        coef, *_ = np.linalg.lstsq(x_fit.T, h_fit.T, rcond=None)
        resid = h_eval - coef.T @ x_eval
        rmse = alpha_rmse(resid.mean(axis=1))
        base = historical_average_baseline(h, split.train.start, eval_window)
        return oos_r_squared(rmse, base.rmse)

    x_tr = np.vstack([f_tr, g_tr])
    x_va = np.vstack([f_va, g_va])
    vld_r2 = window_r2(
        x_tr,
        h[:, split.train.start: split.train.stop],
        x_va,
        h[:, split.validation.start: split.validation.stop],
        split.validation,
    )
    # test loadings refit on train+validation with the refit model's factors
    f_tr2, g_tr2, _ = _model_window(refit, dataset, split.train, "dissect-train")
    f_va2, g_va2, _ = _model_window(refit, dataset, split.validation, "dissect-validation")
    x_fit2 = np.vstack([np.hstack([f_tr2, f_va2]), np.hstack([g_tr2, g_va2])])
    x_te = np.vstack([f_te, g_te])
    test_r2 = window_r2(
        x_fit2,
        h[:, split.train.start: split.validation.stop],
        x_te,
        h[:, split.test.start: split.test.stop],
        split.test,
    )
    if label is None:
        label = row_label(model.benchmark, model.arch.factors, model.arch.conditions)
    return DissectRow(
        label=label, set_name=set_name, vld_r2=vld_r2, test_r2=test_r2, overlap_warning=overlap
    )


# ---------------------------------------------------------------------------
# Report assembly and rendering
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    sig_rows: list[SigRow] = field(default_factory=list)
    dissect_rows: list[DissectRow] = field(default_factory=list)
    loss_curves: dict[str, np.ndarray] = field(default_factory=dict)
    benchmark_losses: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _fmt(x: float) -> str:
    return repr(float(x))


def render_report(report: EvalReport, outdir) -> dict[str, Path]:
    """Write the machine-readable tables and a plain-text summary.

    Floats use shortest round-trip formatting so the CSVs reload exactly
    and repeated runs with the same inputs are byte-identical.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    oos = out / "table_oos.csv"
    with open(oos, "w", newline="", encoding="utf-8") as fh:
        fh.write("model,ins_r2,vld_r2,test_r2\n")
        for row in report.rows:
            fh.write(f"{row.label},{_fmt(row.ins_r2)},{_fmt(row.vld_r2)},{_fmt(row.test_r2)}\n")
    paths["table_oos"] = oos

    sig = out / "table_sig.csv"
    with open(sig, "w", newline="", encoding="utf-8") as fh:
        fh.write("model,ins_sig,vld_sig,test_sig,n_anomalies,n_excluded\n")
        for row in report.sig_rows:
            fh.write(
                f"{row.label},{row.ins_sig},{row.vld_sig},{row.test_sig},"
                f"{row.n_anomalies},{row.n_excluded}\n"
            )
    paths["table_sig"] = sig

    dis = out / "table_dissect.csv"
    with open(dis, "w", newline="", encoding="utf-8") as fh:
        fh.write("model,holdout_set,vld_r2,test_r2,overlaps_training\n")
        for row in report.dissect_rows:
            fh.write(
                f"{row.label},{row.set_name},{_fmt(row.vld_r2)},{_fmt(row.test_r2)},"
                f"{int(row.overlap_warning)}\n"
            )
    paths["table_dissect"] = dis

    curves = out / "loss_curves.csv"
    labels = list(report.loss_curves)
    bench_labels = list(report.benchmark_losses)
    n_epochs = max((len(c) for c in report.loss_curves.values()), default=0)
    with open(curves, "w", newline="", encoding="utf-8") as fh:
        fh.write("epoch," + ",".join(labels + [f"{b}_ols" for b in bench_labels]) + "\n")
        for e in range(n_epochs):
            cells = [str(e + 1)]
            cells += [_fmt(c[e]) if e < len(c) else "" for c in (report.loss_curves[k] for k in labels)]
            cells += [_fmt(report.benchmark_losses[b]) for b in bench_labels]
            fh.write(",".join(cells) + "\n")
    paths["loss_curves"] = curves

    summary = out / "summary.txt"
    lines = ["deep factor engine report", "=" * 26, ""]
    for key in sorted(report.metadata):
        lines.append(f"{key}: {report.metadata[key]}")
    if report.metadata:
        lines.append("")
    if report.rows:
        lines.append(f"{'model':<18}{'INS R2':>10}{'VLD R2':>10}{'Test R2':>10}")
        for row in report.rows:
            lines.append(
                f"{row.label:<18}{row.ins_r2:>10.4f}{row.vld_r2:>10.4f}{row.test_r2:>10.4f}"
            )
        lines.append("")
    if report.sig_rows:
        lines.append(f"{'model':<18}{'INS sig':>10}{'VLD sig':>10}{'Test sig':>10}")
        for row in report.sig_rows:
            lines.append(
                f"{row.label:<18}{row.ins_sig:>10d}{row.vld_sig:>10d}{row.test_sig:>10d}"
            )
        lines.append("")
    if report.dissect_rows:
        lines.append(f"{'model / holdout':<28}{'VLD R2':>10}{'Test R2':>10}")
        for row in report.dissect_rows:
            name = f"{row.label} / {row.set_name}"
            lines.append(f"{name:<28}{row.vld_r2:>10.4f}{row.test_r2:>10.4f}")
        lines.append("")
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths["summary"] = summary
    return paths


def load_table(path) -> tuple[list[str], list[list]]:
    """Reload a rendered CSV; numeric fields come back as floats."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    header, body = rows[0], rows[1:]
    parsed = []
    for row in body:
        out_row: list = []
        for tok in row:
            try:
                out_row.append(float(tok))
            except ValueError:
                out_row.append(tok)
        parsed.append(out_row)
    return header, parsed
