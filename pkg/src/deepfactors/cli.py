"""Batch command-line interface.

Commands:

* ``simulate``  write a synthetic market (panel, macro, factors,
  portfolios, ground-truth factor returns) to a directory;
* ``train``     run the full protocol: grid training on the training
  window, validation selection with frozen loadings, re-training on
  train+validation, one test evaluation; writes checkpoints and a
  manifest;
* ``evaluate``  score saved checkpoints (no retraining) and render the
  report tables;
* ``dissect``   out-of-sample pricing of an external holdout portfolio
  file with the model frozen;
* ``gradcheck`` finite-difference audit of the full-stack gradients on a
  built-in tiny fixture; fails (exit 3) above 1e-3 relative error.

Every command is deterministic given (input files, config, seed): output
files carry no timestamps and format floats in shortest round-trip form.
Configuration precedence is CLI flag over config-file key over default,
and the effective values are recorded in the manifest.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DeepFactorsError,
    DegenerateCrossSectionError,
    EmptyLegError,
    NumericalError,
)
from .conditional import unwrap_regions, write_conditional_coeffs_csv
from .evaluation import (
    EvalReport,
    dissect_holdout,
    evaluate_splits,
    render_report,
    significance_row,
)
from .panel import (
    PanelDataset,
    SampleSplit,
    SplitConfig,
    load_panel,
    load_series_csv,
    split_months,
    write_panel,
    write_series_csv,
)
from .simulate import SimConfig, simulate_market, toy_dataset
from .pricing import write_coeffs_csv
from .training import (
    ModelArch,
    TrainConfig,
    TrainedModel,
    grid_select,
    gradient_check_full,
    load_model,
    materialize_factors,
    prepare_dataset,
    refit_and_test,
    save_model,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

DATA_FILES = ("panel.csv", "macro.csv", "factors.csv", "portfolios.csv")
GRADCHECK_SEED = 1
GRADCHECK_TOLERANCE = 1e-3


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _read_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.replace("=", " ").split(None, 1)
                if len(parts) != 2:
                    raise DataError(f"{path}:{line_no}: expected 'key value'")
                values[parts[0]] = parts[1].strip()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return values


def _merge(args: argparse.Namespace, file_values: dict[str, str], defaults: dict):
    """CLI flag > config-file key > default; returns the effective dict."""
    merged = {}
    for key, default in defaults.items():
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            merged[key] = cli_val
        elif key in file_values:
            raw = file_values[key]
            if isinstance(default, bool):
                merged[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                merged[key] = int(raw)
            elif isinstance(default, float):
                merged[key] = float(raw)
            else:
                merged[key] = raw
        else:
            merged[key] = default
    return merged


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_json(payload: dict, path: Path) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    defaults = {f: getattr(SimConfig(), f) for f in (
        "firms", "months", "chars", "macros", "true_factors", "noise", "seed",
        "factor_vol", "factor_sharpe", "mkt_vol", "mkt_sharpe", "char_noise",
        "persistence", "beta_spread", "me_sigma", "macro_persistence",
    )}
    file_values = _read_config_file(args.config) if args.config else {}
    merged = _merge(args, file_values, defaults)
    config = SimConfig(**merged)
    dataset, truth = simulate_market(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_panel(dataset, *(out / name for name in DATA_FILES))
    truth_vals = np.column_stack([truth.market, truth.factor_returns])
    truth_names = ["mkt"] + [f"f{p + 1}" for p in range(truth.factor_returns.shape[1])]
    write_series_csv(out / "truth.csv", dataset.months, truth_names, truth_vals)
    if args.holdout_file:
        write_series_csv(out / args.holdout_file, dataset.months, truth.holdout_names, truth.holdout_returns)
    print(f"simulate: wrote {len(DATA_FILES) + 1} files to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# shared data loading
# ---------------------------------------------------------------------------


def _load_dataset(args, merged) -> PanelDataset:
    data_dir = Path(merged["data"])
    return load_panel(
        data_dir / "panel.csv",
        data_dir / "macro.csv",
        data_dir / "factors.csv",
        data_dir / "portfolios.csv",
        universe_cap=merged["universe_cap"],
    )


def _make_split(dataset: PanelDataset, merged) -> SampleSplit:
    if merged["fractions"]:
        parts = [float(tok) for tok in str(merged["fractions"]).split(",")]
        if len(parts) != 2:
            raise DataError("--fractions needs two comma-separated shares, e.g. 0.6,0.2")
        split_cfg = SplitConfig(fractions=(parts[0], parts[1]))
    else:
        split_cfg = SplitConfig(train_end=merged["train_end"], val_end=merged["val_end"])
    return split_months(dataset.months, split_cfg)


_TRAIN_DEFAULTS = dict(
    data=".",
    out="run",
    benchmark="capm",
    train_end="2002-12",
    val_end="2010-12",
    fractions="",
    universe_cap=3000,
    epochs=200,
    batch_months=120,
    step_size=1e-3,
    step_decay=100.0,
    p_keep=0.9,
    temp_start=1.0,
    temp_end=0.1,
    tau=0.8,
    seed=0,
    seeds_per_cell=3,
    layers="1,2,3,4,5",
    factors="1,2,3,4,5",
    conditions="0,1,2,3",
    ensemble=0,
    optimizer="sgd",
    parsimony_se=1.0,
    jobs=1,
)


def _grid_tuple(value) -> tuple[int, ...]:
    if isinstance(value, tuple):
        return value
    try:
        return _int_tuple(str(value))
    except argparse.ArgumentTypeError as exc:
        raise DataError(str(exc)) from None


def _train_config(merged) -> TrainConfig:
    return TrainConfig(
        epochs=merged["epochs"],
        batch_months=merged["batch_months"],
        step_size=merged["step_size"],
        step_decay=merged["step_decay"],
        p_keep=merged["p_keep"],
        temp_start=merged["temp_start"],
        temp_end=merged["temp_end"],
        tau=merged["tau"],
        seed=merged["seed"],
        seeds_per_cell=merged["seeds_per_cell"],
        layers_grid=_grid_tuple(merged["layers"]),
        factors_grid=_grid_tuple(merged["factors"]),
        conditions_grid=_grid_tuple(merged["conditions"]),
        ensemble=merged["ensemble"],
        optimizer=merged["optimizer"],
        parsimony_se=merged["parsimony_se"],
    )


def cmd_train(args) -> int:
    file_values = _read_config_file(args.config) if args.config else {}
    merged = _merge(args, file_values, _TRAIN_DEFAULTS)
    dataset = _load_dataset(args, merged)
    split = _make_split(dataset, merged)
    config = _train_config(merged)
    benchmark = merged["benchmark"]
    dataset = prepare_dataset(dataset, split)

    out = Path(merged["out"])
    selected, report = grid_select(
        dataset, config, split, benchmark, jobs=merged["jobs"], checkpoint_dir=out / "checkpoints"
    )
    final, test_stats = refit_and_test(selected, dataset, config, split)
    save_model(selected, out / "model_selected.txt")
    save_model(final, out / "model_final.txt")
    grid_entries = []
    for cell in report.cells:
        entry = {
            "layers": cell.arch.layers,
            "factors": cell.arch.factors,
            "conditions": cell.arch.conditions,
            "val_rmse_by_seed": [float(v) for v in cell.val_rmse_by_seed],
            "val_rmse_mean": float(cell.val_rmse_mean),
            "val_rmse_std": float(cell.val_rmse_std),
            "train_loss_final": float(cell.train_loss_final),
            "failed": cell.failed,
            "error": cell.error,
        }
        grid_entries.append(entry)
    manifest = {
        "command": "train",
        "config": {k: merged[k] for k in sorted(merged)},
        "grid": grid_entries,
        "selected": {
            "layers": report.selected.layers,
            "factors": report.selected.factors,
            "conditions": report.selected.conditions,
        },
        "test": {
            "alpha_rmse": float(test_stats.rmse),
            "n_significant": int(test_stats.n_significant),
            "n_portfolios": int(test_stats.alpha.size),
        },
        "split": {
            "train_months": len(split.train),
            "validation_months": len(split.validation),
            "test_months": len(split.test),
        },
        "warnings": sorted(set(final.warnings)),
    }
    _write_json(manifest, out / "manifest.json")
    print(
        f"train: selected L={report.selected.layers} P={report.selected.factors} "
        f"C={report.selected.conditions}; test alpha RMSE {test_stats.rmse:.6f}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate / dissect
# ---------------------------------------------------------------------------

_EVAL_DEFAULTS = dict(
    data=".",
    run="run",
    out="report",
    benchmark="capm",
    train_end="2002-12",
    val_end="2010-12",
    fractions="",
    universe_cap=3000,
    anomalies="",
)


def _load_models(merged) -> tuple[TrainedModel, TrainedModel]:
    run_dir = Path(merged["run"])
    selected_path = run_dir / "model_selected.txt"
    final_path = run_dir / "model_final.txt"
    for p in (selected_path, final_path):
        if not p.exists():
            raise DataError(f"missing checkpoint {p}")
    return load_model(selected_path), load_model(final_path)


def _benchmark_rows(dataset, split, config, tags):
    """Least-squares benchmark rows for every tag the data can support."""
    rows = []
    losses = {}
    for tag in tags:
        try:
            dataset.benchmark_count(tag)
        except DataError:
            continue
        bench = train(dataset, ModelArch(1, 0), tag, config, split.train)
        bench_refit, _ = refit_and_test(bench, dataset, config, split)
        rows.append(evaluate_splits(bench, bench_refit, dataset, split))
        losses[tag] = bench.final_train_loss
    return rows, losses


def cmd_evaluate(args) -> int:
    file_values = _read_config_file(args.config) if args.config else {}
    merged = _merge(args, file_values, _EVAL_DEFAULTS)
    dataset = _load_dataset(args, merged)
    split = _make_split(dataset, merged)
    dataset = prepare_dataset(dataset, split)
    selected, final = _load_models(merged)
    quick = TrainConfig(epochs=1, batch_months=min(12, len(split.train)), seed=0)

    bench_rows, bench_losses = _benchmark_rows(dataset, split, quick, ("capm", "ff3", "ff4"))
    model_row = evaluate_splits(selected, final, dataset, split)
    report = EvalReport(
        rows=bench_rows + [model_row],
        loss_curves={model_row.label: selected.loss_curve},
        benchmark_losses=bench_losses,
        metadata={
            "benchmark": selected.benchmark,
            "selected_arch": f"L={selected.arch.layers} P={selected.arch.factors} C={selected.arch.conditions}",
            "seed": selected.seed,
        },
    )
    if merged["anomalies"]:
        months, _, values, _ = load_series_csv(merged["anomalies"], "A", allow_missing=True)
        if months != dataset.months:
            raise DataError("anomaly file months do not match the dataset")
        report.sig_rows.append(significance_row(selected, final, dataset, split, values.T))
    paths = render_report(report, merged["out"])
    out = Path(merged["out"])
    if selected.n_deep:
        full_view = dataset.view(range(dataset.n_months), purpose="export", benchmark=selected.benchmark)
        f_full = materialize_factors(selected.net, selected.sort_spec, full_view)
        write_series_csv(
            out / "deep_factors.csv",
            dataset.months,
            [f"f{p + 1}" for p in range(f_full.shape[0])],
            f_full.T,
        )
    if selected.conditional:
        write_conditional_coeffs_csv(
            unwrap_regions(selected.cond_spec, selected.cond_head),
            dataset.portfolio_names,
            out / "conditional_coefficients.csv",
        )
    else:
        write_coeffs_csv(
            selected.coeffs,
            dataset.portfolio_names,
            out / "coefficients.csv",
            benchmark_names=dataset.factor_names[: selected.coeffs.gamma.shape[1]],
        )
    print(f"evaluate: wrote report to {merged['out']}")
    for row in report.rows:
        print(f"  {row.label:<18} INS {row.ins_r2:+.4f}  VLD {row.vld_r2:+.4f}  Test {row.test_r2:+.4f}")
    return EXIT_OK


def cmd_dissect(args) -> int:
    file_values = _read_config_file(args.config) if args.config else {}
    defaults = dict(_EVAL_DEFAULTS)
    defaults["holdout"] = ""
    merged = _merge(args, file_values, defaults)
    if not merged["holdout"]:
        raise DataError("dissect needs --holdout FILE (portfolio-format csv)")
    dataset = _load_dataset(args, merged)
    split = _make_split(dataset, merged)
    dataset = prepare_dataset(dataset, split)
    selected, final = _load_models(merged)
    months, names, values, _ = load_series_csv(merged["holdout"], "H", allow_missing=False)
    if months != dataset.months:
        raise DataError("holdout file months do not match the dataset")
    row = dissect_holdout(selected, final, dataset, split, values, set_name=Path(merged["holdout"]).stem)
    report = EvalReport(dissect_rows=[row])
    render_report(report, merged["out"])
    print(f"dissect: {row.set_name}  VLD R2 {row.vld_r2:+.4f}  Test R2 {row.test_r2:+.4f}")
    if row.overlap_warning:
        print("warning: holdout portfolios overlap the training portfolios", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    dataset = toy_dataset(firms=8, assets=3, months=30, chars=2, macros=1, seed=GRADCHECK_SEED)
    split = SampleSplit(train=range(0, 12), validation=range(12, 20), test=range(20, 30))
    dataset = prepare_dataset(dataset, split)
    config = TrainConfig(
        epochs=1, batch_months=6, step_size=0.02, p_keep=1.0, temp_end=0.3,
        seed=0, seeds_per_cell=1, layers_grid=(2,), factors_grid=(2,), conditions_grid=(0,),
    )
    model = train(dataset, ModelArch(2, 2), "capm", config, split.train)
    failed = False
    for stack in (args.stack,) if args.stack else ("linear", "full"):
        result = gradient_check_full(model, dataset, split.train, stack=stack)
        if result.status == "skipped":
            print(f"gradcheck[{stack}]: skipped ({result.detail})")
            continue
        ok = result.max_rel_error <= GRADCHECK_TOLERANCE
        failed = failed or not ok
        print(
            f"gradcheck[{stack}]: max relative error {result.max_rel_error:.3e} over "
            f"{result.n_parameters} parameters (kink clearance {result.kink_clearance:.2e}) "
            f"-> {'ok' if ok else 'FAIL'}"
        )
    if failed:
        raise NumericalError(f"gradient check exceeded {GRADCHECK_TOLERANCE}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deepfactors", description="deep long-short factor engine")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a synthetic market to a directory")
    sim.add_argument("--config", help="flat key-value simulator config file")
    sim.add_argument("--out", default="data", help="output directory")
    sim.add_argument("--holdout-file", default="", help="also write holdout grids to this name")
    for name in ("firms", "months", "chars", "macros", "true_factors", "seed"):
        sim.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int)
    for name in ("noise", "factor_vol", "factor_sharpe", "mkt_vol", "mkt_sharpe",
                 "char_noise", "persistence", "beta_spread", "me_sigma", "macro_persistence"):
        sim.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    sim.set_defaults(func=cmd_simulate)

    tr = sub.add_parser("train", help="grid training, validation selection, refit, test")
    tr.add_argument("--config", help="flat key-value config file")
    tr.add_argument("--data", help="directory with panel/macro/factors/portfolios csv files")
    tr.add_argument("--out", help="run output directory")
    tr.add_argument("--benchmark", choices=("capm", "ff3", "ff4"))
    tr.add_argument("--train-end", dest="train_end", help="last training month YYYY-MM")
    tr.add_argument("--val-end", dest="val_end", help="last validation month YYYY-MM")
    tr.add_argument("--fractions", help="train,validation shares, e.g. 0.6,0.2")
    tr.add_argument("--universe-cap", dest="universe_cap", type=int)
    for name in ("epochs", "batch_months", "seed", "seeds_per_cell", "ensemble", "jobs"):
        tr.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int)
    for name in ("step_size", "step_decay", "p_keep", "temp_start", "temp_end", "tau", "parsimony_se"):
        tr.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    tr.add_argument("--optimizer", choices=("sgd", "adam"), help="plain sgd (default) or adam")
    tr.add_argument("--layers", type=_int_tuple, help="comma list of layer counts, e.g. 1,2,3")
    tr.add_argument("--factors", type=_int_tuple, help="comma list of deep-factor counts")
    tr.add_argument("--conditions", type=_int_tuple, help="comma list of condition-pair counts")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="score saved checkpoints and render reports")
    ev.add_argument("--config", help="flat key-value config file")
    ev.add_argument("--data", help="data directory")
    ev.add_argument("--run", help="directory containing model checkpoints")
    ev.add_argument("--out", help="report directory")
    ev.add_argument("--train-end", dest="train_end")
    ev.add_argument("--val-end", dest="val_end")
    ev.add_argument("--fractions")
    ev.add_argument("--universe-cap", dest="universe_cap", type=int)
    ev.add_argument("--anomalies", help="anomaly return csv for significance counting")
    ev.set_defaults(func=cmd_evaluate)

    di = sub.add_parser("dissect", help="price an external holdout portfolio file")
    di.add_argument("--config", help="flat key-value config file")
    di.add_argument("--data", help="data directory")
    di.add_argument("--run", help="directory containing model checkpoints")
    di.add_argument("--out", help="report directory")
    di.add_argument("--train-end", dest="train_end")
    di.add_argument("--val-end", dest="val_end")
    di.add_argument("--fractions")
    di.add_argument("--universe-cap", dest="universe_cap", type=int)
    di.add_argument("--holdout", help="holdout portfolio csv (date,H1..Hn)")
    di.set_defaults(func=cmd_dissect)

    gc = sub.add_parser("gradcheck", help="finite-difference audit of the full stack")
    gc.add_argument("--stack", choices=("full", "linear", "hard"), help="check one stack only")
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, DegenerateCrossSectionError, EmptyLegError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DeepFactorsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
