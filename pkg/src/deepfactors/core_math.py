"""Deterministic numerical primitives used across the factor engine.

Ranking, pricing-error metrics, and the out-of-sample R-squared
convention every reporting path shares.  All functions are pure, operate
on double-precision arrays, and raise rather than return NaN on
degenerate input.

Conventions:

* pricing error alpha_i  = per-asset mean of (realized - predicted)
  excess return over a window, in decimal monthly units;
* RMSE               = sqrt(mean_i alpha_i^2);
* out-of-sample R^2  = 1 - RMSE_model^2 / RMSE_benchmark^2 (may be
  negative when the model underperforms the benchmark);
* t-statistic        = sqrt(T) * mean(e) / sigma(e) with the population
  (1/T) standard deviation, significant when |t| > 1.96.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

__all__ = [
    "SIGNIFICANCE_THRESHOLD",
    "AlphaStats",
    "alpha_rmse",
    "alpha_stats_from_residuals",
    "alpha_tstat",
    "is_significant",
    "oos_r_squared",
    "rank_ascending",
]

SIGNIFICANCE_THRESHOLD = 1.96


@dataclass(frozen=True)
class AlphaStats:
    """Per-asset mean pricing errors, their t-statistics, and the RMSE.

    ``rmse`` always equals ``sqrt(mean(alpha**2))`` of the stored alphas.
    """

    alpha: np.ndarray  # (N,) mean pricing error per asset
    tstat: np.ndarray  # (N,) sqrt(T)*mean/std per asset
    rmse: float

    @property
    def n_significant(self) -> int:
        return int(np.sum(np.abs(self.tstat) > SIGNIFICANCE_THRESHOLD))


def _as_vector(values, name: str) -> np.ndarray:
    y = np.asarray(values, dtype=float)
    if y.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {y.shape}")
    return y


def rank_ascending(values) -> np.ndarray:
    """Stable ascending ranks 1..M; ties go to the lower original index.

    Raises ``ValueError`` naming the first non-finite element.
    """
    y = _as_vector(values, "values")
    if y.size == 0:
        raise ValueError("cannot rank an empty vector")
    bad = np.flatnonzero(~np.isfinite(y))
    if bad.size:
        raise ValueError(f"non-finite value at index {bad[0]}")
    order = np.argsort(y, kind="stable")
    ranks = np.empty(y.size, dtype=np.int64)
    ranks[order] = np.arange(1, y.size + 1)
    return ranks


def alpha_rmse(alphas) -> float:
    """Root mean squared pricing error across assets."""
    a = _as_vector(alphas, "alphas")
    if a.size == 0:
        raise ValueError("alpha_rmse needs at least one asset")
    return float(np.sqrt(np.mean(a * a)))


def oos_r_squared(rmse_model: float, rmse_avg: float) -> float:
    """Relative pricing performance vs. a benchmark RMSE.

    ``1 - rmse_model**2 / rmse_avg**2``; negative when the model is worse
    than the benchmark, exactly 1 only for a perfect model.
    """
    if rmse_avg <= 0.0:
        raise NumericalError("degenerate benchmark: benchmark RMSE must be positive")
    if rmse_model < 0.0:
        raise ValueError("model RMSE must be nonnegative")
    ratio = rmse_model / rmse_avg
    return 1.0 - ratio * ratio


def alpha_tstat(residual_series) -> float:
    """t-statistic of a residual series: sqrt(T) * mean / population std.

    A constant nonzero series has no well-defined t and raises; a series
    that is identically its mean of zero returns 0.
    """
    e = _as_vector(residual_series, "residual_series")
    t_len = e.size
    if t_len < 2:
        raise ValueError(f"need at least 2 observations, got {t_len}")
    if not np.all(np.isfinite(e)):
        raise ValueError("residual series contains non-finite values")
    mean = float(np.mean(e))
    sigma = float(np.sqrt(np.mean((e - mean) ** 2)))
    if sigma == 0.0:
        if mean == 0.0:
            return 0.0
        raise NumericalError("degenerate residuals: zero variance with nonzero mean")
    return float(np.sqrt(t_len) * mean / sigma)


def is_significant(tstat: float) -> bool:
    return abs(tstat) > SIGNIFICANCE_THRESHOLD


def alpha_stats_from_residuals(residuals) -> AlphaStats:
    """Build :class:`AlphaStats` from an (N, T) residual panel."""
    e = np.asarray(residuals, dtype=float)
    if e.ndim != 2:
        raise ValueError(f"residuals must be (N, T), got shape {e.shape}")
    if e.shape[1] < 2:
        raise ValueError("need at least 2 months of residuals")
    alpha = e.mean(axis=1)
    tstat = np.array([alpha_tstat(row) for row in e])
    return AlphaStats(alpha=alpha, tstat=tstat, rmse=alpha_rmse(alpha))
