"""End-to-end training of the deep factor stack.

One training step runs, per month in a mini-batch: input block ->
network -> soft sort -> value weights -> factor returns -> pricing head,
accumulates the mean squared pricing error over the batch, and
backpropagates manually through every stage (the soft sort provides the
gradient bridge that hard memberships cannot).  Reported factors always
come from hard sorting in eval mode.

Training conventions:

* mini-batches are contiguous windows of ``batch_months`` months with a
  random start, reshuffled every step; an epoch runs enough steps to
  cover the training window once;
* the sort temperature anneals geometrically from ``temp_start`` to
  ``temp_end`` across epochs;
* the step size decays as ``step_size / (1 + step / step_decay)``;
* once per ``coeff_refit_epochs`` epochs the head coefficients are
  re-estimated by least squares on the materialized hard-sort factors
  (block-coordinate descent: exact in the coefficients, gradient steps
  in the network), which also makes the final in-sample loss directly
  comparable to the benchmark's least-squares loss;
* dropout applies to every layer input at train time only.

Model selection trains every grid cell on the training window, scores
validation pricing errors with loadings frozen at their training-window
values, and takes the minimum under a one-standard-error parsimony rule:
cells within one cross-asset standard error of the best count as ties,
and ties resolve toward fewer layers, then fewer factors, then fewer
conditions.  The selected architecture is then re-trained on
train+validation before its single test evaluation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import network
from .conditional import ConditionSpec, ConditionalHead, relu_pairs_forward
from .core_math import alpha_rmse, alpha_stats_from_residuals
from .errors import (
    DataError,
    DegenerateCrossSectionError,
    EmptyLegError,
    NumericalError,
)
from .panel import PanelDataset, PanelView, SampleSplit, build_input, input_row_count, rank_normalize, standardize_macro
from .pricing import EnsembleHead, PricingCoeffs, fit_ensemble, loss_breakdown, predict_returns
from .sorting import (
    SortSpec,
    factor_return_vjp,
    factor_return_with_aux,
    leg_thresholds,
    sort_hard,
    sort_soft,
)

__all__ = [
    "GridCellResult",
    "GridReport",
    "ModelArch",
    "TrainConfig",
    "TrainedModel",
    "grid_select",
    "gradient_check_full",
    "load_model",
    "materialize_factors",
    "prepare_dataset",
    "refit_and_test",
    "save_model",
    "sgd_step",
    "train",
]


@dataclass(frozen=True)
class ModelArch:
    """One grid cell: network depth, deep-factor count, condition pairs."""

    layers: int
    factors: int
    conditions: int = 0

    def __post_init__(self):
        if self.layers < 1 and self.factors > 0:
            raise ValueError("need at least one layer when deep factors are requested")
        if self.factors < 0 or self.conditions < 0:
            raise ValueError("factors and conditions must be nonnegative")


@dataclass
class TrainConfig:
    """Knobs of the SGD loop and the selection grid."""

    epochs: int = 200
    batch_months: int = 120
    step_size: float = 1e-3
    step_decay: float = 100.0  # eta_t = step_size / (1 + t / step_decay)
    p_keep: float = 0.9
    temp_start: float = 1.0
    temp_end: float = 0.1
    tau: float = 0.8
    seed: int = 0
    layers_grid: tuple[int, ...] = (1, 2, 3, 4, 5)
    factors_grid: tuple[int, ...] = (1, 2, 3, 4, 5)
    conditions_grid: tuple[int, ...] = (0, 1, 2, 3)
    seeds_per_cell: int = 3
    activation: str = "tanh"
    ensemble: int = 0  # >0: final coefficients from an SGD ensemble of this size
    coeff_refit_epochs: int = 1  # 0 disables periodic least-squares refits
    straight_through: bool = False  # hard memberships forward, soft gradients back
    optimizer: str = "sgd"  # plain SGD is the reproducible default; "adam" opt-in
    parsimony_se: float = 1.0  # cells within this many s.e. of the best tie; 0 = strict argmin

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_months < 1:
            raise ValueError("batch_months must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")

    def temperature_at(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.temp_end
        frac = epoch / (self.epochs - 1)
        return float(self.temp_start * (self.temp_end / self.temp_start) ** frac)

    def step_size_at(self, step: int) -> float:
        return self.step_size / (1.0 + step / self.step_decay)


@dataclass
class TrainedModel:
    """A trained grid cell: network, sort rule, head, and its loss history."""

    arch: ModelArch
    benchmark: str
    sort_spec: SortSpec
    net: network.NetworkParams | None
    coeffs: PricingCoeffs
    cond_spec: ConditionSpec | None = None
    cond_head: ConditionalHead | None = None
    ensemble: EnsembleHead | None = None
    loss_curve: np.ndarray = field(default_factory=lambda: np.zeros(0))
    final_train_loss: float = float("nan")
    train_window: range = range(0)
    seed: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def n_deep(self) -> int:
        return self.arch.factors

    @property
    def conditional(self) -> bool:
        return self.cond_spec is not None

    def predict(self, f, g) -> np.ndarray:
        if self.conditional:
            return relu_pairs_forward(f, g, self.cond_spec, self.cond_head)
        return predict_returns(f, g, self.coeffs)


# ---------------------------------------------------------------------------
# Data preparation and factor materialization
# ---------------------------------------------------------------------------


def prepare_dataset(dataset: PanelDataset, split: SampleSplit) -> PanelDataset:
    """Rank-normalize characteristics and train-standardize macro predictors."""
    out = dataset
    if not out.normalized:
        out = rank_normalize(out)
    if not out.macro_standardized:
        out = standardize_macro(out, split.train)
    return out


def _require_prepared(dataset: PanelDataset) -> None:
    if not (dataset.normalized and dataset.macro_standardized):
        raise DataError("dataset must go through prepare_dataset before training")


def materialize_factors(
    net: network.NetworkParams,
    sort_spec: SortSpec,
    view: PanelView,
    warnings: list[str] | None = None,
) -> np.ndarray:
    """Hard-sort deep factor returns (P, T_window) for a month window.

    Degenerate months (too few eligible firms, an empty leg) yield zero
    factor returns and a recorded warning instead of failing.
    """
    p_deep = net.n_outputs
    out = np.zeros((p_deep, view.n_months))
    hard = SortSpec(tau=sort_spec.tau, temperature=sort_spec.temperature, mode="hard")
    for col, t in enumerate(view.indices):
        md = view.month(t)
        z0, _ = build_input(md.z, md.x)
        y, _ = network.forward(z0, net, mode="eval")
        for p in range(p_deep):
            try:
                u = sort_hard(y[p], hard, md.eligible)
                f, _ = factor_return_with_aux(u, md.v, md.r)
                out[p, col] = f
            except (DegenerateCrossSectionError, EmptyLegError) as exc:
                if warnings is not None:
                    warnings.append(f"{md.month}: deep factor {p + 1} zeroed ({exc})")
    return out


def _window_arrays(dataset: PanelDataset, months: range, n_benchmark: int):
    g = dataset.factors[months.start: months.stop, :n_benchmark].T
    r = dataset.portfolios[months.start: months.stop].T
    return r, g


# ---------------------------------------------------------------------------
# Trainable state and the manual full-stack gradient
# ---------------------------------------------------------------------------


@dataclass
class _State:
    net: network.NetworkParams | None
    coeffs: PricingCoeffs
    cond_spec: ConditionSpec | None
    cond_head: ConditionalHead | None


@dataclass
class _Grads:
    net_w: list[np.ndarray]
    net_b: list[np.ndarray]
    beta: np.ndarray
    gamma: np.ndarray
    directions: np.ndarray | None
    beta_plus: np.ndarray | None
    beta_minus: np.ndarray | None


def _zero_grads(state: _State) -> _Grads:
    return _Grads(
        net_w=[np.zeros_like(w) for w in state.net.weights] if state.net else [],
        net_b=[np.zeros_like(b) for b in state.net.biases] if state.net else [],
        beta=np.zeros_like(state.coeffs.beta),
        gamma=np.zeros_like(state.coeffs.gamma),
        directions=None if state.cond_spec is None else np.zeros_like(state.cond_spec.directions),
        beta_plus=None if state.cond_head is None else np.zeros_like(state.cond_head.beta_plus),
        beta_minus=None if state.cond_head is None else np.zeros_like(state.cond_head.beta_minus),
    )


def _month_factors_soft(state, md, spec, mode, rng, p_keep, straight_through, stack, threshold_store=None):
    """Forward pass through net and sorting for one month; keeps tape info.

    ``threshold_store`` pins sort thresholds per (month, row) across
    repeated calls so finite differences see the same blocked constants
    the analytic gradient assumes.
    """
    z0, _ = build_input(md.z, md.x)
    y, cache = network.forward(z0, state.net, mode=mode, rng=rng, p_keep=p_keep)
    p_deep = y.shape[0]
    f = np.zeros(p_deep)
    tape = []
    if stack == "linear":
        # differentiable bypass of the sort: characteristic-weighted portfolio
        m = y.shape[1]
        f = y @ md.r / m
        return f, (cache, tape, y, "linear")
    for p in range(p_deep):
        try:
            thresholds = None
            if threshold_store is not None:
                key = (md.index, p)
                if key not in threshold_store:
                    threshold_store[key] = leg_thresholds(y[p], spec, md.eligible)
                thresholds = threshold_store[key]
            u_soft, jac = sort_soft(y[p], spec, md.eligible, thresholds=thresholds)
            u = sort_hard(y[p], spec, md.eligible).astype(float) if straight_through else u_soft
            fp, aux = factor_return_with_aux(u, md.v, md.r)
            f[p] = fp
            tape.append((u, jac, aux))
        except (DegenerateCrossSectionError, EmptyLegError):
            tape.append(None)
    return f, (cache, tape, y, "soft")


def _month_backward(state, md, grads, d_rhat, f, fwd):
    """Accumulate gradients for one month given d(loss)/d(prediction)."""
    cache, tape, y, stack = fwd
    g_vec = md.g
    if state.cond_spec is not None:
        x = np.concatenate([f, g_vec])
        proj = state.cond_spec.directions @ x
        relu_pos = np.maximum(proj, 0.0)
        relu_neg = np.maximum(-proj, 0.0)
        grads.beta_plus += np.outer(d_rhat, relu_pos)
        grads.beta_minus += np.outer(d_rhat, relu_neg)
        da = state.cond_head.beta_plus.T @ d_rhat
        dc = state.cond_head.beta_minus.T @ d_rhat
        dproj = da * (proj > 0.0) - dc * (proj < 0.0)
        grads.directions += np.outer(dproj, x)
        dx = state.cond_spec.directions.T @ dproj
        df = dx[: f.size]
    else:
        grads.beta += np.outer(d_rhat, f)
        grads.gamma += np.outer(d_rhat, g_vec)
        df = state.coeffs.beta.T @ d_rhat
    if state.net is None:
        return
    if stack == "linear":
        dy = np.outer(df, md.r) / y.shape[1]
    else:
        dy = np.zeros_like(y)
        for p, entry in enumerate(tape):
            if entry is None:
                continue
            u, jac, aux = entry
            du = factor_return_vjp(float(df[p]), u, md.v, md.r, aux)
            dy[p] = du * jac
    gw, gb, _ = network.backward(cache, state.net, dy)
    for l in range(len(gw)):
        grads.net_w[l] += gw[l]
        grads.net_b[l] += gb[l]


def _predict_state(state: _State, f, g) -> np.ndarray:
    if state.cond_spec is not None:
        return relu_pairs_forward(f, g, state.cond_spec, state.cond_head)
    return predict_returns(f, g, state.coeffs)


def _batch_loss_and_grads(
    state: _State,
    view: PanelView,
    batch: list[int],
    spec: SortSpec,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    p_keep: float = 1.0,
    straight_through: bool = False,
    stack: str = "soft",
    threshold_store: dict | None = None,
) -> tuple[float, _Grads]:
    """Mean squared pricing error on a month batch plus exact gradients."""
    grads = _zero_grads(state)
    n_assets = state.coeffs.n_assets
    scale = 1.0 / (n_assets * len(batch))
    loss = 0.0
    for t in batch:
        md = view.month(t)
        if state.net is not None:
            f, fwd = _month_factors_soft(
                state, md, spec, mode, rng, p_keep, straight_through, stack, threshold_store
            )
        else:
            f, fwd = np.zeros(0), (None, [], None, stack)
        rhat = _predict_state(state, f, md.g)
        err = md.R - rhat
        loss += float(err @ err) * scale
        d_rhat = -2.0 * err * scale
        _month_backward(state, md, grads, d_rhat, f, fwd)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite batch loss over months {batch[:3]}...")
    return loss, grads


class _AdamState:
    """First/second moment accumulators for the opt-in adaptive update."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}
        self.t = 0

    def direction(self, key: int, grad: np.ndarray) -> np.ndarray:
        m = self.m.setdefault(key, np.zeros_like(grad))
        v = self.v.setdefault(key, np.zeros_like(grad))
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1**self.t)
        v_hat = v / (1.0 - self.beta2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


def _apply_update(state: _State, grads: _Grads, eta: float, adam: _AdamState | None = None) -> None:
    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    if state.net is not None:
        pairs += list(zip(state.net.weights, grads.net_w))
        pairs += list(zip(state.net.biases, grads.net_b))
    if state.cond_spec is not None:
        pairs += [
            (state.cond_spec.directions, grads.directions),
            (state.cond_head.beta_plus, grads.beta_plus),
            (state.cond_head.beta_minus, grads.beta_minus),
        ]
    else:
        pairs += [(state.coeffs.beta, grads.beta), (state.coeffs.gamma, grads.gamma)]
    if adam is not None:
        adam.t += 1
        for key, (arr, grad) in enumerate(pairs):
            arr -= eta * adam.direction(key, grad)
    else:
        for arr, grad in pairs:
            arr -= eta * grad
    for name, arrs in (
        ("network", state.net.weights + state.net.biases if state.net else []),
        ("head", [state.coeffs.beta, state.coeffs.gamma]),
        ("conditional", [] if state.cond_spec is None else [state.cond_spec.directions, state.cond_head.beta_plus, state.cond_head.beta_minus]),
    ):
        for arr in arrs:
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite {name} parameters after update (eta={eta})")


def sgd_step(
    state: _State,
    view: PanelView,
    batch: list[int],
    spec: SortSpec,
    config: TrainConfig,
    rng: np.random.Generator,
    step_index: int,
    adam: _AdamState | None = None,
) -> float:
    """One mini-batch gradient step on every trainable parameter."""
    loss, grads = _batch_loss_and_grads(
        state,
        view,
        batch,
        spec,
        mode="train",
        rng=rng,
        p_keep=config.p_keep,
        straight_through=config.straight_through,
    )
    _apply_update(state, grads, config.step_size_at(step_index), adam)
    return loss


# ---------------------------------------------------------------------------
# Coefficient refits
# ---------------------------------------------------------------------------


def _refit_coefficients(state: _State, f_train: np.ndarray, r_train: np.ndarray, g_train: np.ndarray) -> None:
    """Least-squares head refit on materialized factors (min-norm on ties)."""
    if state.cond_spec is not None:
        x = np.vstack([f_train, g_train])
        proj = state.cond_spec.directions @ x
        feats = np.vstack([np.maximum(proj, 0.0), np.maximum(-proj, 0.0)])  # (2C, T)
        coef, *_ = np.linalg.lstsq(feats.T, r_train.T, rcond=None)
        c = state.cond_spec.n_pairs
        state.cond_head.beta_plus = coef[:c].T
        state.cond_head.beta_minus = coef[c:].T
    else:
        x = np.vstack([f_train, g_train])
        coef, *_ = np.linalg.lstsq(x.T, r_train.T, rcond=None)
        p = f_train.shape[0]
        state.coeffs.beta = coef[:p].T if p else np.zeros((r_train.shape[0], 0))
        state.coeffs.gamma = coef[p:].T


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(
    dataset: PanelDataset,
    arch: ModelArch,
    benchmark: str,
    config: TrainConfig,
    months: range,
    seed: int | None = None,
) -> TrainedModel:
    """Train one grid cell on a month window and materialize its factors."""
    _require_prepared(dataset)
    seed = config.seed if seed is None else seed
    if config.batch_months > len(months):
        raise DataError(
            f"batch_months {config.batch_months} exceeds training window {len(months)}"
        )
    n_benchmark = dataset.benchmark_count(benchmark)
    view = dataset.view(months, purpose="train", benchmark=benchmark)
    r_train, g_train = _window_arrays(dataset, months, n_benchmark)
    n_assets = dataset.n_portfolios
    rng = np.random.default_rng(seed)
    warnings: list[str] = []
    spec0 = SortSpec(tau=config.tau, temperature=config.temp_start, mode="soft")

    p_deep = arch.factors
    if p_deep == 0:
        # degenerate cell: the benchmark least-squares fit, no network
        state = _State(
            net=None,
            coeffs=PricingCoeffs(beta=np.zeros((n_assets, 0)), gamma=np.zeros((n_assets, n_benchmark))),
            cond_spec=None,
            cond_head=None,
        )
        _refit_coefficients(state, np.zeros((0, len(months))), r_train, g_train)
        bench_loss = loss_breakdown(r_train, predict_returns(np.zeros((0, len(months))), g_train, state.coeffs)).total
        return TrainedModel(
            arch=arch,
            benchmark=benchmark,
            sort_spec=SortSpec(tau=config.tau, temperature=config.temp_end, mode="hard"),
            net=None,
            coeffs=state.coeffs,
            loss_curve=np.full(config.epochs, bench_loss),
            final_train_loss=bench_loss,
            train_window=months,
            seed=seed,
            warnings=warnings,
        )

    k0 = input_row_count(dataset.n_chars, dataset.n_macro)
    sizes = network.default_layer_sizes(arch.layers, n_outputs=p_deep)
    net = network.init_params(k0, sizes, seed=seed, activation=config.activation)
    coeffs = PricingCoeffs(
        beta=0.1 * rng.standard_normal((n_assets, p_deep)),
        gamma=np.zeros((n_assets, n_benchmark)),
    )
    cond_spec = cond_head = None
    if arch.conditions > 0:
        dim = p_deep + n_benchmark
        cond_spec = ConditionSpec(
            directions=rng.standard_normal((arch.conditions, dim)) / np.sqrt(dim),
            n_deep=p_deep,
            n_benchmark=n_benchmark,
        )
        cond_head = ConditionalHead(
            beta_plus=0.5 * rng.standard_normal((n_assets, arch.conditions)),
            beta_minus=0.5 * rng.standard_normal((n_assets, arch.conditions)),
        )
    state = _State(net=net, coeffs=coeffs, cond_spec=cond_spec, cond_head=cond_head)

    month_list = list(months)
    steps_per_epoch = max(1, int(np.ceil(len(month_list) / config.batch_months)))
    loss_curve = np.zeros(config.epochs)
    global_step = 0

    def materialize_train(collect_warnings: bool = False) -> np.ndarray:
        mat_view = dataset.view(months, purpose="materialize", benchmark=benchmark)
        return materialize_factors(state.net, spec0, mat_view, warnings if collect_warnings else None)

    if config.coeff_refit_epochs:
        _refit_coefficients(state, materialize_train(), r_train, g_train)

    adam = _AdamState() if config.optimizer == "adam" else None
    for epoch in range(config.epochs):
        spec = spec0.with_temperature(config.temperature_at(epoch))
        for _ in range(steps_per_epoch):
            if len(month_list) > config.batch_months:
                start = int(rng.integers(0, len(month_list) - config.batch_months + 1))
                batch = month_list[start: start + config.batch_months]
            else:
                batch = month_list
            try:
                sgd_step(state, view, batch, spec, config, rng, global_step, adam)
            except NumericalError as exc:
                raise NumericalError(
                    f"epoch {epoch}, step {global_step}, temperature {spec.temperature:.4f}: {exc}"
                ) from exc
            global_step += 1
        f_train = materialize_train()
        if config.coeff_refit_epochs and (epoch + 1) % config.coeff_refit_epochs == 0:
            _refit_coefficients(state, f_train, r_train, g_train)
        loss_curve[epoch] = loss_breakdown(
            r_train, _predict_state(state, f_train, g_train)
        ).total

    # final head coefficients on hard factors: plain least squares or ensemble
    f_train = materialize_train(collect_warnings=True)
    ensemble = None
    if config.coeff_refit_epochs:
        if config.ensemble > 0 and state.cond_spec is None:
            ensemble = fit_ensemble(r_train, f_train, g_train, config.ensemble, seed=seed)
            state.coeffs = ensemble.mean_coeffs
        else:
            _refit_coefficients(state, f_train, r_train, g_train)
    final_loss = loss_breakdown(r_train, _predict_state(state, f_train, g_train)).total

    return TrainedModel(
        arch=arch,
        benchmark=benchmark,
        sort_spec=SortSpec(tau=config.tau, temperature=config.temp_end, mode="hard"),
        net=state.net,
        coeffs=state.coeffs,
        cond_spec=state.cond_spec,
        cond_head=state.cond_head,
        ensemble=ensemble,
        loss_curve=loss_curve,
        final_train_loss=final_loss,
        train_window=months,
        seed=seed,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# Model selection and the refit/test protocol
# ---------------------------------------------------------------------------


@dataclass
class GridCellResult:
    arch: ModelArch
    val_rmse_by_seed: list[float]
    train_loss_final: float
    val_rmse_se: float = float("nan")  # cross-asset sampling error of the val RMSE
    failed: bool = False
    error: str = ""

    @property
    def val_rmse_mean(self) -> float:
        return float(np.mean(self.val_rmse_by_seed)) if self.val_rmse_by_seed else float("nan")

    @property
    def val_rmse_std(self) -> float:
        return float(np.std(self.val_rmse_by_seed)) if self.val_rmse_by_seed else float("nan")


@dataclass
class GridReport:
    cells: list[GridCellResult]
    selected: ModelArch
    benchmark: str
    seeds_per_cell: int


def validation_alphas(model: TrainedModel, dataset: PanelDataset, window: range, purpose: str = "validate") -> np.ndarray:
    """Per-asset mean pricing errors on a window, loadings frozen."""
    n_benchmark = dataset.benchmark_count(model.benchmark)
    r_win, g_win = _window_arrays(dataset, window, n_benchmark)
    if model.n_deep:
        view = dataset.view(window, purpose=purpose, benchmark=model.benchmark)
        f_win = materialize_factors(model.net, model.sort_spec, view, model.warnings)
    else:
        f_win = np.zeros((0, len(window)))
    return (r_win - model.predict(f_win, g_win)).mean(axis=1)


def validation_rmse(model: TrainedModel, dataset: PanelDataset, window: range, purpose: str = "validate") -> float:
    """Alpha RMSE on a window with the model's loadings frozen."""
    return alpha_rmse(validation_alphas(model, dataset, window, purpose))


def _rmse_standard_error(alphas: np.ndarray) -> float:
    """Cross-asset sampling error of sqrt(mean(alpha^2)), delta method."""
    n = alphas.size
    rmse = alpha_rmse(alphas)
    if rmse == 0.0 or n < 2:
        return 0.0
    se_msq = float(np.std(alphas**2, ddof=1)) / np.sqrt(n)
    return se_msq / (2.0 * rmse)


def _cell_seed(base_seed: int, arch: ModelArch, member: int) -> int:
    ss = np.random.SeedSequence(
        entropy=base_seed, spawn_key=(arch.layers, arch.factors, arch.conditions, member)
    )
    return int(ss.generate_state(1)[0])


def _train_cell(dataset: PanelDataset, config: TrainConfig, split: SampleSplit, benchmark: str, arch: ModelArch):
    """One grid cell across its seeds; returns (result, first-seed model)."""
    rmses: list[float] = []
    first_model = None
    rmse_se = float("nan")
    try:
        for member in range(config.seeds_per_cell):
            model = train(dataset, arch, benchmark, config, split.train, seed=_cell_seed(config.seed, arch, member))
            alphas = validation_alphas(model, dataset, split.validation)
            if first_model is None:
                first_model = model
                rmse_se = _rmse_standard_error(alphas)
            rmses.append(alpha_rmse(alphas))
        return (
            GridCellResult(
                arch=arch,
                val_rmse_by_seed=rmses,
                train_loss_final=first_model.final_train_loss,
                val_rmse_se=rmse_se,
            ),
            first_model,
        )
    except NumericalError as exc:
        return (
            GridCellResult(arch=arch, val_rmse_by_seed=rmses, train_loss_final=float("nan"), failed=True, error=str(exc)),
            None,
        )


def grid_select(
    dataset: PanelDataset,
    config: TrainConfig,
    split: SampleSplit,
    benchmark: str,
    jobs: int = 1,
    checkpoint_dir=None,
) -> tuple[TrainedModel, GridReport]:
    """Train the whole grid, score validation errors, pick the winner.

    Selection is the validation-RMSE argmin with a one-standard-error
    parsimony rule: every cell whose mean RMSE lies within
    ``parsimony_se`` cross-asset standard errors of the best counts as a
    tie, and ties resolve toward fewer layers, then fewer factors, then
    fewer conditions (so the unconditional model wins whenever
    conditioning does not clearly help, and statistically flat surfaces
    collapse to the shallow corner).  Set ``parsimony_se=0`` for the
    strict argmin.  ``jobs > 1`` farms cells out to worker processes;
    per-cell seeds make the outcome identical either way (access logging
    then stays in the workers).
    """
    dataset = prepare_dataset(dataset, split)
    cells = [
        ModelArch(layers=l, factors=p, conditions=c)
        for l, p, c in itertools.product(config.layers_grid, config.factors_grid, config.conditions_grid)
    ]
    if not cells:
        raise DataError("empty architecture grid")
    results: list[GridCellResult] = []
    models: dict[ModelArch, TrainedModel] = {}
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_cell, dataset, config, split, benchmark, arch) for arch in cells]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_train_cell(dataset, config, split, benchmark, arch) for arch in cells]
    for cell, model in outcomes:
        results.append(cell)
        if model is not None:
            models[cell.arch] = model
            if checkpoint_dir is not None:
                ckpt = Path(checkpoint_dir)
                ckpt.mkdir(parents=True, exist_ok=True)
                name = f"cell_L{cell.arch.layers}_P{cell.arch.factors}_C{cell.arch.conditions}.txt"
                save_model(model, ckpt / name)
    viable = [c for c in results if not c.failed]
    if not viable:
        raise NumericalError("every grid cell failed")
    best = min(viable, key=lambda c: (c.val_rmse_mean, c.arch.layers, c.arch.factors, c.arch.conditions))
    tolerance = config.parsimony_se * (best.val_rmse_se if np.isfinite(best.val_rmse_se) else 0.0)
    tied = [c for c in viable if c.val_rmse_mean <= best.val_rmse_mean + tolerance]
    chosen = min(tied, key=lambda c: (c.arch.layers, c.arch.factors, c.arch.conditions, c.val_rmse_mean))
    report = GridReport(cells=results, selected=chosen.arch, benchmark=benchmark, seeds_per_cell=config.seeds_per_cell)
    return models[chosen.arch], report


def refit_and_test(
    selected: TrainedModel,
    dataset: PanelDataset,
    config: TrainConfig,
    split: SampleSplit,
):
    """Re-train the selected architecture on train+validation, test once.

    Returns the refit model and its test-window alpha statistics; test
    months are touched only through the evaluation view.
    """
    dataset = prepare_dataset(dataset, split)
    refit_window = split.train_and_validation
    model = train(dataset, selected.arch, selected.benchmark, config, refit_window, seed=selected.seed)
    assert len(model.train_window) == len(split.train) + len(split.validation)
    n_benchmark = dataset.benchmark_count(model.benchmark)
    r_test, g_test = _window_arrays(dataset, split.test, n_benchmark)
    if model.n_deep:
        test_view = dataset.view(split.test, purpose="test-evaluate", benchmark=model.benchmark)
        f_test = materialize_factors(model.net, model.sort_spec, test_view, model.warnings)
    else:
        f_test = np.zeros((0, len(split.test)))
    stats = alpha_stats_from_residuals(r_test - model.predict(f_test, g_test))
    return model, stats


# ---------------------------------------------------------------------------
# Full-stack gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    status: str  # "ok" | "skipped"
    max_rel_error: float
    n_parameters: int
    detail: str = ""
    kink_clearance: float = float("inf")  # distance of memberships/projections from ReLU kinks


def _stack_clearance(state: _State, view: PanelView, months: range, spec: SortSpec, stack: str) -> float:
    """Smallest |u| (and |projection|) at the check point.

    Central differences straddle a kink whenever this clearance is
    comparable to the step times the local slope, so callers should
    check fixtures keep it comfortably above ``fd_step``.
    """
    if stack == "linear":
        return float("inf")
    worst = float("inf")
    for t in months:
        md = view.month(t)
        f, (_, tape, _, _) = _month_factors_soft(state, md, spec, "eval", None, 1.0, False, stack)
        for entry in tape:
            if entry is None:
                continue
            u = entry[0]
            live = np.abs(u) > 0.0
            if live.any():
                worst = min(worst, float(np.min(np.abs(u[live]))))
        if state.cond_spec is not None:
            proj = state.cond_spec.directions @ np.concatenate([f, md.g])
            worst = min(worst, float(np.min(np.abs(proj))))
    return worst


def _flatten_state(state: _State) -> list[np.ndarray]:
    arrays: list[np.ndarray] = []
    if state.net is not None:
        arrays.extend(state.net.weights)
        arrays.extend(state.net.biases)
    if state.cond_spec is not None:
        arrays.extend([state.cond_spec.directions, state.cond_head.beta_plus, state.cond_head.beta_minus])
    else:
        arrays.extend([state.coeffs.beta, state.coeffs.gamma])
    return arrays


def _grad_arrays(state: _State, grads: _Grads) -> list[np.ndarray]:
    arrays: list[np.ndarray] = []
    if state.net is not None:
        arrays.extend(grads.net_w)
        arrays.extend(grads.net_b)
    if state.cond_spec is not None:
        arrays.extend([grads.directions, grads.beta_plus, grads.beta_minus])
    else:
        arrays.extend([grads.beta, grads.gamma])
    return arrays


def gradient_check_full(
    model: TrainedModel,
    dataset: PanelDataset,
    months: range,
    stack: str = "full",
    fd_step: float = 1e-5,
) -> GradCheckResult:
    """Central finite differences over every parameter of the full stack.

    ``stack='full'`` checks the trained configuration through the soft
    sort (dropout off); ``stack='linear'`` swaps in identity activations
    and a linear factor map, where gradients are exact to rounding;
    ``stack='hard'`` asks for the raw hard-sort path, which has no
    gradient, so the check reports "skipped".
    """
    if stack not in ("full", "linear", "hard"):
        raise ValueError(f"stack must be 'full', 'linear', or 'hard', got {stack!r}")
    if stack == "hard":
        return GradCheckResult(
            status="skipped", max_rel_error=0.0, n_parameters=0,
            detail="hard sorting is non-differentiable; nothing to check",
        )
    _require_prepared(dataset)
    spec = SortSpec(tau=model.sort_spec.tau, temperature=max(model.sort_spec.temperature, 0.25), mode="soft")
    net = model.net.copy() if model.net is not None else None
    if net is not None and stack == "linear":
        net = replace(net, activation="identity")
    state = _State(
        net=net,
        coeffs=model.coeffs.copy(),
        cond_spec=None if model.cond_spec is None else ConditionSpec(
            model.cond_spec.directions.copy(), model.cond_spec.n_deep, model.cond_spec.n_benchmark
        ),
        cond_head=None if model.cond_head is None else model.cond_head.copy(),
    )
    view = dataset.view(months, purpose="gradcheck", benchmark=model.benchmark)
    batch = list(months)
    mode_stack = "linear" if stack == "linear" else "soft"
    clearance = _stack_clearance(state, view, months, spec, mode_stack)
    # sort thresholds are gradient-blocked constants; the base pass pins
    # them so the finite differences differentiate the same function
    store: dict = {}

    def loss_only() -> float:
        loss, _ = _batch_loss_and_grads(
            state, view, batch, spec, mode="eval", stack=mode_stack, threshold_store=store
        )
        return loss

    _, grads = _batch_loss_and_grads(
        state, view, batch, spec, mode="eval", stack=mode_stack, threshold_store=store
    )
    analytic = _grad_arrays(state, grads)
    params = _flatten_state(state)
    # relative error is normalized by the overall gradient scale, so
    # parameters whose gradient is ~0 are not scored on rounding noise
    gmax = max((float(np.max(np.abs(g))) for g in analytic if g.size), default=0.0)
    floor = max(gmax, 1e-12)
    worst = 0.0
    n_params = 0
    for arr, grad in zip(params, analytic):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            n_params += 1
            orig = arr[ix]
            arr[ix] = orig + fd_step
            lp = loss_only()
            arr[ix] = orig - fd_step
            lm = loss_only()
            arr[ix] = orig
            fd = (lp - lm) / (2.0 * fd_step)
            a = grad[ix]
            denom = max(abs(a), abs(fd), floor)
            worst = max(worst, abs(a - fd) / denom)
    return GradCheckResult(
        status="ok", max_rel_error=worst, n_parameters=n_params, kink_clearance=clearance
    )


# ---------------------------------------------------------------------------
# Model checkpoint format
# ---------------------------------------------------------------------------

MODEL_FORMAT_VERSION = 1


def _write_matrix(fh, name: str, a: np.ndarray) -> None:
    a = np.atleast_2d(a)
    fh.write(f"{name} {a.shape[0]} {a.shape[1]}\n")
    for row in a:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def _read_matrix(lines: list[str], pos: int, name: str):
    head = lines[pos].split()
    if head[0] != name:
        raise ValueError(f"expected section {name!r}, found {head[0]!r}")
    rows, cols = int(head[1]), int(head[2])
    a = np.array([[float(t) for t in lines[pos + 1 + r].split()] for r in range(rows)])
    if a.shape != (rows, cols):
        raise ValueError(f"section {name!r} is malformed")
    return a, pos + 1 + rows


def save_model(model: TrainedModel, path) -> None:
    """Write a checkpoint as deterministic, exactly round-tripping text."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"deepfactors-model v{MODEL_FORMAT_VERSION}\n")
        fh.write(
            f"arch {model.arch.layers} {model.arch.factors} {model.arch.conditions}\n"
        )
        fh.write(f"benchmark {model.benchmark}\n")
        fh.write(f"sort {repr(model.sort_spec.tau)} {repr(model.sort_spec.temperature)} {model.sort_spec.mode}\n")
        fh.write(f"seed {model.seed}\n")
        fh.write(f"window {model.train_window.start} {model.train_window.stop}\n")
        fh.write(f"final_train_loss {repr(model.final_train_loss)}\n")
        fh.write(f"net {'none' if model.net is None else model.net.activation}\n")
        if model.net is not None:
            fh.write("sizes " + " ".join(str(k) for k in model.net.layer_sizes) + "\n")
            for l in range(model.net.n_layers):
                _write_matrix(fh, f"A{l + 1}", model.net.weights[l])
                _write_matrix(fh, f"b{l + 1}", model.net.biases[l][None, :])
        _write_matrix(fh, "beta", model.coeffs.beta)
        _write_matrix(fh, "gamma", model.coeffs.gamma)
        fh.write(f"conditional {0 if model.cond_spec is None else 1}\n")
        if model.cond_spec is not None:
            fh.write(f"cond_dims {model.cond_spec.n_deep} {model.cond_spec.n_benchmark}\n")
            _write_matrix(fh, "directions", model.cond_spec.directions)
            _write_matrix(fh, "beta_plus", model.cond_head.beta_plus)
            _write_matrix(fh, "beta_minus", model.cond_head.beta_minus)
        _write_matrix(fh, "loss_curve", model.loss_curve[None, :])


def load_model(path) -> TrainedModel:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("deepfactors-model v"):
        raise ValueError(f"{path}: not a model checkpoint")
    if int(lines[0].split("v")[-1]) != MODEL_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    arch_tok = lines[1].split()[1:]
    arch = ModelArch(layers=int(arch_tok[0]), factors=int(arch_tok[1]), conditions=int(arch_tok[2]))
    benchmark = lines[2].split()[1]
    sort_tok = lines[3].split()[1:]
    sort_spec = SortSpec(tau=float(sort_tok[0]), temperature=float(sort_tok[1]), mode=sort_tok[2])
    seed = int(lines[4].split()[1])
    win_tok = lines[5].split()[1:]
    window = range(int(win_tok[0]), int(win_tok[1]))
    final_loss = float(lines[6].split()[1])
    net_tag = lines[7].split()[1]
    pos = 8
    net = None
    if net_tag != "none":
        sizes = [int(t) for t in lines[pos].split()[1:]]
        pos += 1
        weights, biases = [], []
        for l in range(1, len(sizes)):
            a, pos = _read_matrix(lines, pos, f"A{l}")
            b, pos = _read_matrix(lines, pos, f"b{l}")
            weights.append(a)
            biases.append(b[0])
        net = network.NetworkParams(weights=weights, biases=biases, activation=net_tag, seed=seed)
    beta, pos = _read_matrix(lines, pos, "beta")
    gamma, pos = _read_matrix(lines, pos, "gamma")
    cond_flag = int(lines[pos].split()[1])
    pos += 1
    cond_spec = cond_head = None
    if cond_flag:
        dims = [int(t) for t in lines[pos].split()[1:]]
        pos += 1
        directions, pos = _read_matrix(lines, pos, "directions")
        beta_plus, pos = _read_matrix(lines, pos, "beta_plus")
        beta_minus, pos = _read_matrix(lines, pos, "beta_minus")
        cond_spec = ConditionSpec(directions=directions, n_deep=dims[0], n_benchmark=dims[1])
        cond_head = ConditionalHead(beta_plus=beta_plus, beta_minus=beta_minus)
    curve, pos = _read_matrix(lines, pos, "loss_curve")
    return TrainedModel(
        arch=arch,
        benchmark=benchmark,
        sort_spec=sort_spec,
        net=net,
        coeffs=PricingCoeffs(beta=beta, gamma=gamma),
        cond_spec=cond_spec,
        cond_head=cond_head,
        loss_curve=curve[0],
        final_train_loss=final_loss,
        train_window=window,
        seed=seed,
    )
