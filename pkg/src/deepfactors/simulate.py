"""Synthetic market generator with known factor structure.

Real production data for this problem is proprietary, so verification
runs on simulated markets where the truth is known exactly:

* each firm carries a fixed loading on every planted factor and a fixed
  market beta;
* each planted factor p is revealed through characteristic p, which is
  the loading plus a persistent AR(1) wiggle, so monthly cross-sectional
  ranks evolve slowly and sorting on the characteristic recovers the
  loading ordering;
* firm returns are ``beta * market + sum_p loading_p * factor_p +
  noise * idio``;
* test portfolios are 5x5 sequential-sorted grids (primary = the planted
  characteristic, secondary = the next one) with membership frozen at
  the first month and equal weights, so with zero idiosyncratic noise
  every portfolio is spanned exactly by the market and planted factors;
* a holdout set of grids on the last two characteristics supports
  out-of-sample dissection.

Benchmark factor columns are the market plus long-short sorts on
characteristics that drive nothing, giving CAPM/3-factor/4-factor style
controls without planting premia in them.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import DataError
from .panel import PanelDataset, month_sequence
from .sorting import SortSpec, sort_hard, long_short_weights

__all__ = ["GroundTruth", "SimConfig", "simulate_market", "toy_dataset"]

START_MONTH = "1975-01"
GRID_SIDE = 5


@dataclass
class SimConfig:
    """Flat simulator configuration; all keys are optional in config files."""

    firms: int = 200
    months: int = 360
    chars: int = 4
    macros: int = 2
    true_factors: int = 1
    noise: float = 0.05  # idiosyncratic monthly vol
    seed: int = 0
    factor_vol: float = 0.03  # planted factor monthly vol
    factor_sharpe: float = 0.8  # annualized
    mkt_vol: float = 0.045
    mkt_sharpe: float = 0.5  # annualized
    char_noise: float = 0.5  # AR(1) wiggle scale around the fixed loading
    persistence: float = 0.95  # AR(1) coefficient of the wiggle
    beta_spread: float = 0.2
    me_sigma: float = 1.0  # dispersion of log market equity
    macro_persistence: float = 0.9

    def __post_init__(self):
        for name in ("firms", "months", "chars", "macros"):
            if getattr(self, name) < 1:
                raise DataError(f"simulator config: {name} must be positive")
        if self.chars < 2:
            raise DataError("simulator config: need at least 2 characteristics for portfolio grids")
        if not 0 <= self.true_factors <= self.chars:
            raise DataError("simulator config: true_factors must lie in [0, chars]")
        if self.noise < 0:
            raise DataError("simulator config: noise must be nonnegative")
        if self.firms < GRID_SIDE * GRID_SIDE:
            raise DataError(f"simulator config: need at least {GRID_SIDE * GRID_SIDE} firms for 5x5 grids")

    @classmethod
    def from_file(cls, path) -> "SimConfig":
        """Parse a flat ``key value`` / ``key=value`` text file."""
        kwargs = {}
        valid = {f.name: f.type for f in fields(cls)}
        try:
            with open(path, encoding="utf-8") as fh:
                for line_no, raw in enumerate(fh, start=1):
                    line = raw.split("#", 1)[0].strip()
                    if not line:
                        continue
                    parts = line.replace("=", " ").split()
                    if len(parts) != 2:
                        raise DataError(f"{path}:{line_no}: expected 'key value', got {raw.strip()!r}")
                    key, value = parts
                    if key not in valid:
                        raise DataError(f"{path}:{line_no}: unknown simulator key {key!r}")
                    caster = int if valid[key] in ("int", int) else float
                    try:
                        kwargs[key] = caster(value)
                    except ValueError:
                        raise DataError(f"{path}:{line_no}: bad value {value!r} for {key}") from None
        except OSError as exc:
            raise DataError(f"{path}: {exc}") from exc
        return cls(**kwargs)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for f in fields(self):
                fh.write(f"{f.name} {getattr(self, f.name)!r}\n")


@dataclass
class GroundTruth:
    """What the simulator actually planted."""

    market: np.ndarray  # (T,)
    factor_returns: np.ndarray  # (T, F)
    loadings: np.ndarray  # (F, J) fixed per-firm factor loadings
    betas: np.ndarray  # (J,) market betas
    holdout_returns: np.ndarray  # (T, 25) grids on undriven characteristics
    holdout_names: list[str]


def _ar1_panel(rng, rho: float, shape) -> np.ndarray:
    """Stationary unit-variance AR(1) innovations along the first axis."""
    t_len = shape[0]
    out = np.empty(shape)
    out[0] = rng.standard_normal(shape[1:])
    scale = np.sqrt(1.0 - rho * rho)
    for t in range(1, t_len):
        out[t] = rho * out[t - 1] + scale * rng.standard_normal(shape[1:])
    return out


def _grid_cells(primary: np.ndarray, secondary: np.ndarray) -> list[np.ndarray]:
    """Sequential 5x5 sort: quintiles of primary, then of secondary within."""
    order1 = np.argsort(primary, kind="stable")
    cells = []
    for block in np.array_split(order1, GRID_SIDE):
        order2 = block[np.argsort(secondary[block], kind="stable")]
        cells.extend(np.array_split(order2, GRID_SIDE))
    return cells


def _grid_returns(returns: np.ndarray, cells: list[np.ndarray]) -> np.ndarray:
    return np.column_stack([returns[:, cell].mean(axis=1) for cell in cells])


def toy_dataset(
    firms: int = 8,
    assets: int = 3,
    months: int = 12,
    chars: int = 2,
    macros: int = 1,
    seed: int = 0,
) -> PanelDataset:
    """Tiny unstructured dataset for gradient checks and smoke tests.

    Shapes are free of the 5x5-grid constraint, and returns are scaled
    O(0.1) so finite differences of the loss sit well above rounding.
    """
    rng = np.random.default_rng(seed)
    returns = 0.1 * rng.standard_normal((months, firms))
    chars_arr = np.stack([_ar1_panel(rng, 0.9, (months, firms)) for _ in range(chars)])
    market_equity = np.exp(rng.standard_normal((months, firms)))
    macro_arr = np.clip(0.5 * _ar1_panel(rng, 0.9, (months, macros)), -1.0, 1.0)
    factors = 0.1 * rng.standard_normal((months, 1))
    mix = rng.standard_normal((firms, assets)) / firms
    portfolios = returns @ mix + 0.02 * rng.standard_normal((months, assets))
    return PanelDataset(
        months=month_sequence(START_MONTH, months),
        firm_ids=[f"F{j + 1:04d}" for j in range(firms)],
        returns=returns,
        market_equity=market_equity,
        characteristics=chars_arr,
        char_names=[f"c{k + 1}" for k in range(chars)],
        macro=macro_arr,
        macro_names=[f"x{e + 1}" for e in range(macros)],
        factors=factors,
        factor_names=["g1"],
        portfolios=portfolios,
        portfolio_names=[f"R{i + 1}" for i in range(assets)],
    )


def simulate_market(config: SimConfig, seed: int | None = None) -> tuple[PanelDataset, GroundTruth]:
    """Generate a synthetic dataset plus the planted ground truth."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    j_len, t_len = config.firms, config.months
    k_len, e_len, f_len = config.chars, config.macros, config.true_factors

    betas = 1.0 + config.beta_spread * rng.standard_normal(j_len)
    loadings = rng.standard_normal((f_len, j_len))

    wiggle = np.stack([_ar1_panel(rng, config.persistence, (t_len, j_len)) for _ in range(k_len)])
    chars = np.empty((k_len, t_len, j_len))
    for k in range(k_len):
        if k < f_len:
            chars[k] = loadings[k][None, :] + config.char_noise * wiggle[k]
        else:
            chars[k] = wiggle[k]

    monthly = 1.0 / np.sqrt(12.0)
    mkt = config.mkt_sharpe * monthly * config.mkt_vol + config.mkt_vol * rng.standard_normal(t_len)
    fac = (
        config.factor_sharpe * monthly * config.factor_vol
        + config.factor_vol * rng.standard_normal((t_len, f_len))
    )
    idio = rng.standard_normal((t_len, j_len))
    returns = betas[None, :] * mkt[:, None] + idio * config.noise
    if f_len:
        returns += fac @ loadings

    log_me = config.me_sigma * rng.standard_normal(j_len) + np.cumsum(
        0.05 * rng.standard_normal((t_len, j_len)), axis=0
    )
    market_equity = 100.0 * np.exp(log_me)

    macro = _ar1_panel(rng, config.macro_persistence, (t_len, e_len))

    # benchmark columns: market, then long-short sorts on undriven characteristics
    spec = SortSpec(tau=0.8)
    bench_cols = [mkt]
    style_chars = [k for k in range(f_len, k_len)][:3]
    for k in style_chars:
        series = np.empty(t_len)
        for t in range(t_len):
            u = sort_hard(chars[k, t], spec)
            series[t] = long_short_weights(u, market_equity[t]) @ returns[t]
        bench_cols.append(series)
    while len(bench_cols) < 4:
        bench_cols.append(0.02 * rng.standard_normal(t_len))
    factors_mat = np.column_stack(bench_cols)
    factor_names = [f"g{d + 1}" for d in range(factors_mat.shape[1])]

    # test portfolios: one 5x5 grid per planted factor (fixed membership)
    grids = max(f_len, 1)
    port_cols = []
    port_names = []
    for p in range(grids):
        primary = chars[p, 0]
        secondary = chars[(p + 1) % k_len, 0]
        cells = _grid_cells(primary, secondary)
        port_cols.append(_grid_returns(returns, cells))
        port_names.extend(
            f"R{p * GRID_SIDE * GRID_SIDE + a * GRID_SIDE + b + 1}"
            for a in range(GRID_SIDE)
            for b in range(GRID_SIDE)
        )
    portfolios = np.hstack(port_cols)

    holdout_cells = _grid_cells(chars[k_len - 2, 0], chars[k_len - 1, 0])
    holdout = _grid_returns(returns, holdout_cells)
    holdout_names = [f"H{i + 1}" for i in range(holdout.shape[1])]

    months = month_sequence(START_MONTH, t_len)
    dataset = PanelDataset(
        months=months,
        firm_ids=[f"F{j + 1:04d}" for j in range(j_len)],
        returns=returns,
        market_equity=market_equity,
        characteristics=chars,
        char_names=[f"c{k + 1}" for k in range(k_len)],
        macro=macro,
        macro_names=[f"x{e + 1}" for e in range(e_len)],
        factors=factors_mat,
        factor_names=factor_names,
        portfolios=portfolios,
        portfolio_names=port_names,
    )
    truth = GroundTruth(
        market=mkt,
        factor_returns=fac,
        loadings=loadings,
        betas=betas,
        holdout_returns=holdout,
        holdout_names=holdout_names,
    )
    return dataset, truth
