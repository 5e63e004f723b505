"""Linear pricing head, pricing-error loss, and coefficient fitting.

A test portfolio's predicted excess return is an intercept-free linear
combination of deep factors f and benchmark factors g.  The training
loss is the mean squared prediction error over assets and months, which
splits exactly into a time-series term, a cross-sectional term (the mean
squared alpha the engine actually targets), and a cross term that is
zero up to rounding when alphas are in-sample means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import AlphaStats, alpha_stats_from_residuals

__all__ = [
    "EnsembleHead",
    "LossBreakdown",
    "PricingCoeffs",
    "fit_ensemble",
    "fit_ols",
    "loss_breakdown",
    "predict_returns",
    "tradable_alphas",
    "write_coeffs_csv",
]


@dataclass
class PricingCoeffs:
    """Intercept-free loadings: beta on deep factors, gamma on benchmarks."""

    beta: np.ndarray  # (N, P)
    gamma: np.ndarray  # (N, D)

    def __post_init__(self):
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        self.gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if self.beta.shape[0] != self.gamma.shape[0]:
            raise ValueError(
                f"beta has {self.beta.shape[0]} assets but gamma has {self.gamma.shape[0]}"
            )
        if not (np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.gamma))):
            raise ValueError("pricing coefficients must be finite")

    @property
    def n_assets(self) -> int:
        return self.beta.shape[0]

    def copy(self) -> "PricingCoeffs":
        return PricingCoeffs(self.beta.copy(), self.gamma.copy())


def _factor_block(f, n_name: str) -> np.ndarray:
    """Coerce a factor argument to (K, T); a bare vector is one month."""
    a = np.asarray(f, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{n_name} must be a vector or (K, T) matrix, got shape {a.shape}")
    return a


def predict_returns(f, g, coeffs: PricingCoeffs) -> np.ndarray:
    """Predicted test-portfolio returns beta @ f + gamma @ g (no intercept).

    Accepts one month (vectors -> (N,)) or a window ((P, T), (D, T) ->
    (N, T)).
    """
    single = np.ndim(f) == 1 and np.ndim(g) == 1
    fb = _factor_block(f, "f")
    gb = _factor_block(g, "g")
    if fb.shape[0] != coeffs.beta.shape[1]:
        raise ValueError(f"f has {fb.shape[0]} factors, beta expects {coeffs.beta.shape[1]}")
    if gb.shape[0] != coeffs.gamma.shape[1]:
        raise ValueError(f"g has {gb.shape[0]} factors, gamma expects {coeffs.gamma.shape[1]}")
    if fb.shape[1] != gb.shape[1]:
        raise ValueError(f"f spans {fb.shape[1]} months but g spans {gb.shape[1]}")
    out = coeffs.beta @ fb + coeffs.gamma @ gb
    return out[:, 0] if single else out


@dataclass(frozen=True)
class LossBreakdown:
    """Mean squared pricing error and its exact three-way split.

    ``total = ts_variation + cs_variation + cross_term`` (cross term is
    ~0 whenever the per-asset alphas are the window means, as here).
    """

    total: float
    ts_variation: float
    cs_variation: float
    cross_term: float


def loss_breakdown(returns, predicted) -> LossBreakdown:
    """Decompose mean squared pricing error over an (N, T) panel."""
    r = np.asarray(returns, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if r.shape != p.shape or r.ndim != 2:
        raise ValueError(f"returns {r.shape} and predictions {p.shape} must be equal (N, T) panels")
    if r.shape[1] == 0:
        raise ValueError("loss needs at least one month")
    err = r - p
    alpha = err.mean(axis=1, keepdims=True)
    centered = err - alpha
    total = float(np.mean(err * err))
    ts = float(np.mean(centered * centered))
    cs = float(np.mean(alpha * alpha))
    cross = float(2.0 * np.mean(alpha * centered))
    return LossBreakdown(total=total, ts_variation=ts, cs_variation=cs, cross_term=cross)


def tradable_alphas(returns, f, g, coeffs: PricingCoeffs) -> AlphaStats:
    """Per-asset mean pricing errors over a window, with t-stats and RMSE."""
    r = np.asarray(returns, dtype=float)
    if r.ndim != 2:
        raise ValueError(f"returns must be (N, T), got shape {r.shape}")
    if r.shape[1] < 2:
        raise ValueError("tradable alphas need at least 2 months")
    predicted = predict_returns(f, g, coeffs)
    if predicted.shape != r.shape:
        raise ValueError(f"predictions {predicted.shape} do not match returns {r.shape}")
    return alpha_stats_from_residuals(r - predicted)


def _stack_regressors(f, g, n_months: int) -> tuple[np.ndarray, list[str]]:
    fb = _factor_block(f, "f") if np.size(f) else np.zeros((0, n_months))
    gb = _factor_block(g, "g") if np.size(g) else np.zeros((0, n_months))
    if fb.shape[1] != n_months or gb.shape[1] != n_months:
        raise ValueError("factor series do not span the return window")
    names = [f"f{k + 1}" for k in range(fb.shape[0])] + [f"g{k + 1}" for k in range(gb.shape[0])]
    return np.vstack([fb, gb]), names


def _collinear_columns(x: np.ndarray, names: list[str]) -> list[str]:
    """Greedy scan: a column is collinear if it adds no rank."""
    kept: list[int] = []
    redundant: list[str] = []
    for j in range(x.shape[1]):
        trial = x[:, kept + [j]]
        if np.linalg.matrix_rank(trial) > len(kept):
            kept.append(j)
        else:
            redundant.append(names[j])
    return redundant


def fit_ols(returns, f, g) -> PricingCoeffs:
    """Per-asset least squares of returns on [f; g], no intercept.

    The same regressor matrix serves every asset, so one factorization
    covers the panel.  Rank-deficient regressors raise, naming the
    redundant columns.
    """
    r = np.asarray(returns, dtype=float)
    if r.ndim == 1:
        r = r[None, :]
    t_len = r.shape[1]
    xk, names = _stack_regressors(f, g, t_len)
    k = xk.shape[0]
    if k == 0:
        raise ValueError("need at least one regressor")
    if t_len <= k:
        raise ValueError(f"need more months ({t_len}) than regressors ({k})")
    x = xk.T  # (T, K)
    if np.linalg.matrix_rank(x) < k:
        bad = _collinear_columns(x, names)
        raise ValueError(f"rank-deficient regressors; collinear columns: {', '.join(bad)}")
    coef, *_ = np.linalg.lstsq(x, r.T, rcond=None)  # (K, N)
    n_deep = _factor_block(f, "f").shape[0] if np.size(f) else 0
    beta = coef[:n_deep].T if n_deep else np.zeros((r.shape[0], 0))
    gamma = coef[n_deep:].T
    return PricingCoeffs(beta=np.atleast_2d(beta), gamma=np.atleast_2d(gamma))


@dataclass
class EnsembleHead:
    """A bag of coefficient fits whose predictions are averaged.

    Because each member is linear, the averaged prediction equals the
    prediction of the averaged coefficients; both views are exposed.
    """

    members: list[PricingCoeffs]

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def mean_coeffs(self) -> PricingCoeffs:
        beta = np.mean([m.beta for m in self.members], axis=0)
        gamma = np.mean([m.gamma for m in self.members], axis=0)
        return PricingCoeffs(beta=beta, gamma=gamma)

    def predict(self, f, g) -> np.ndarray:
        preds = [predict_returns(f, g, m) for m in self.members]
        return np.mean(preds, axis=0)


def write_coeffs_csv(coeffs: PricingCoeffs, asset_names, path, factor_names=None, benchmark_names=None) -> None:
    """Export loadings as labeled delimited text, one row per asset."""
    n, p = coeffs.beta.shape
    d = coeffs.gamma.shape[1]
    if len(asset_names) != n:
        raise ValueError(f"{n} assets but {len(asset_names)} names")
    factor_names = factor_names or [f"f{k + 1}" for k in range(p)]
    benchmark_names = benchmark_names or [f"g{k + 1}" for k in range(d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("asset," + ",".join([*factor_names, *benchmark_names]) + "\n")
        for i, name in enumerate(asset_names):
            row = [repr(float(x)) for x in (*coeffs.beta[i], *coeffs.gamma[i])]
            fh.write(f"{name}," + ",".join(row) + "\n")


def _sgd_linear_fit(
    r: np.ndarray,
    x: np.ndarray,
    rng: np.random.Generator,
    epochs: int,
    batch_months: int,
    step_size: float,
) -> np.ndarray:
    """Mini-batch SGD for the no-intercept least squares R ~ coef @ X."""
    n, t_len = r.shape
    k = x.shape[0]
    coef = rng.normal(scale=0.1, size=(n, k))
    batch = min(batch_months, t_len)
    order = np.arange(t_len)
    for _ in range(epochs):
        rng.shuffle(order)
        for start in range(0, t_len, batch):
            cols = order[start:start + batch]
            xb = x[:, cols]
            err = r[:, cols] - coef @ xb
            grad = -2.0 * (err @ xb.T) / (n * cols.size)
            coef -= step_size * grad
    return coef


def fit_ensemble(
    returns,
    f,
    g,
    n_members: int,
    seed: int,
    epochs: int = 60,
    batch_months: int = 24,
    step_size: float | None = None,
) -> EnsembleHead:
    """Fit ``n_members`` independent SGD coefficient sets on shared factors.

    Members differ only in initialization and mini-batch order.  The
    default step size is scaled by the mean regressor power so monthly
    return magnitudes do not dictate the schedule.
    """
    if n_members < 1:
        raise ValueError(f"ensemble size must be >= 1, got {n_members}")
    r = np.asarray(returns, dtype=float)
    if r.ndim == 1:
        r = r[None, :]
    x, _ = _stack_regressors(f, g, r.shape[1])
    if x.shape[0] == 0:
        raise ValueError("need at least one regressor")
    if step_size is None:
        power = float(np.mean(x * x))
        if power <= 0.0:
            raise ValueError("regressors are identically zero")
        step_size = 0.25 / power
    seeds = np.random.SeedSequence(seed).spawn(n_members)
    members = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        coef = _sgd_linear_fit(r, x, rng, epochs, batch_months, step_size)
        n_deep = _factor_block(f, "f").shape[0] if np.size(f) else 0
        members.append(
            PricingCoeffs(
                beta=np.atleast_2d(coef[:, :n_deep]) if n_deep else np.zeros((r.shape[0], 0)),
                gamma=np.atleast_2d(coef[:, n_deep:]),
            )
        )
    return EnsembleHead(members=members)
