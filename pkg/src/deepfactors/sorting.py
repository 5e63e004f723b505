"""Quantile sorting, long-short weighting, and factor returns.

The tradable pipeline is ``membership -> weights -> factor return``:

* :func:`sort_hard` marks the top ``n`` eligible firms +1 and the bottom
  ``n`` firms -1, with ``n = max(1, round((1 - tau) * M))`` over the
  ``M`` eligible firms (clamped to ``M // 2`` so the legs never overlap);
* :func:`sort_soft` is a logistic relaxation of the same membership used
  to pass gradients during training, with the leg thresholds treated as
  constants;
* :func:`long_short_weights` turns memberships into value-weighted long-short
  portfolio weights (long leg sums to +1, short leg to -1);
* :func:`factor_return` is the plain matrix product of weights and
  firm returns.

Masked firms (missing characteristics, outside the universe) never enter
a sort and never receive weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCrossSectionError, EmptyLegError

__all__ = [
    "SortSpec",
    "factor_return",
    "factor_return_with_aux",
    "factor_return_vjp",
    "leg_size",
    "leg_thresholds",
    "sort_hard",
    "sort_soft",
    "long_short_weights",
]


@dataclass(frozen=True)
class SortSpec:
    """How a cross-section is cut into long/middle/short parts.

    tau is the upper quantile: the top and bottom ``1 - tau`` of eligible
    firms form the legs (tau = 0.8 keeps the classic top/bottom 20%).
    ``temperature`` only matters in soft mode and anneals during training.
    """

    tau: float = 0.8
    temperature: float = 1.0
    mode: str = "hard"

    def __post_init__(self):
        if not 0.5 <= self.tau < 1.0:
            raise ValueError(f"tau must be in [0.5, 1), got {self.tau}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"mode must be 'hard' or 'soft', got {self.mode!r}")

    def with_temperature(self, temperature: float) -> "SortSpec":
        return SortSpec(tau=self.tau, temperature=temperature, mode=self.mode)


def leg_size(n_eligible: int, tau: float) -> int:
    """Symmetric leg size: round((1 - tau) * M), at least 1, legs disjoint."""
    n = int(math.floor((1.0 - tau) * n_eligible + 0.5))
    return max(1, min(n, n_eligible // 2))


def _eligible_values(y: np.ndarray, mask: np.ndarray | None):
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ValueError(f"characteristic must be a 1-D vector, got shape {y.shape}")
    if mask is None:
        mask = np.ones(y.size, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != y.shape:
            raise ValueError("mask shape does not match characteristic vector")
    idx = np.flatnonzero(mask)
    if idx.size < 2:
        raise DegenerateCrossSectionError(
            f"degenerate cross-section: {idx.size} eligible firm(s), need at least 2"
        )
    vals = y[idx]
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise ValueError(f"non-finite characteristic for firm index {idx[bad[0]]}")
    return y, mask, idx, vals


def sort_hard(y, spec: SortSpec, mask=None) -> np.ndarray:
    """Hard quantile membership: +1 top leg, -1 bottom leg, 0 otherwise.

    Ties are broken by the lower firm index landing in the lower rank.
    """
    y, mask, idx, vals = _eligible_values(y, mask)
    n = leg_size(idx.size, spec.tau)
    order = np.argsort(vals, kind="stable")
    u = np.zeros(y.size, dtype=np.int64)
    u[idx[order[:n]]] = -1
    u[idx[order[idx.size - n:]]] = 1
    return u


def leg_thresholds(y, spec: SortSpec, mask=None) -> tuple[float, float]:
    """Cut points (c_lo, c_hi) between the legs and the middle.

    Each threshold is the midpoint between the two eligible order
    statistics that straddle the leg boundary, so on tie-free input every
    firm sits strictly on one side and the soft membership converges to
    the hard one as temperature -> 0.
    """
    _, _, idx, vals = _eligible_values(y, mask)
    m = idx.size
    n = leg_size(m, spec.tau)
    svals = np.sort(vals, kind="stable")
    c_lo = 0.5 * (svals[n - 1] + svals[n])
    c_hi = 0.5 * (svals[m - n - 1] + svals[m - n])
    return float(c_lo), float(c_hi)


def _logistic(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-safe for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sort_soft(y, spec: SortSpec, mask=None, thresholds=None) -> tuple[np.ndarray, np.ndarray]:
    """Logistic relaxation of :func:`sort_hard` with its diagonal Jacobian.

    ``u_j = sigma((y_j - c_hi)/temp) - sigma((c_lo - y_j)/temp)`` for
    eligible firms, 0 for masked firms.  The thresholds are constants
    (no gradient flows through them), so du/dy is diagonal and the
    second return value holds that diagonal.  Pass ``thresholds`` to pin
    the cut points externally (finite-difference checks hold them fixed
    while parameters move, matching the blocked gradient).
    """
    y, mask, _, _ = _eligible_values(y, mask)
    c_lo, c_hi = leg_thresholds(y, spec, mask) if thresholds is None else thresholds
    temp = spec.temperature
    u = np.zeros(y.size, dtype=float)
    jac = np.zeros(y.size, dtype=float)
    ym = y[mask]
    hi = _logistic((ym - c_hi) / temp)
    lo = _logistic((c_lo - ym) / temp)
    u[mask] = hi - lo
    jac[mask] = (hi * (1.0 - hi) + lo * (1.0 - lo)) / temp
    return u, jac


def long_short_weights(u, v) -> np.ndarray:
    """Value-weighted long-short weights from memberships and market equity.

    ``w = u+ * v / sum(u+ * v) - u- * v / sum(u- * v)``.  Works for hard
    and soft memberships alike; by construction the long leg sums to +1
    and the short leg to -1.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"membership {u.shape} and market equity {v.shape} must be equal-length vectors")
    in_leg = u != 0.0
    if np.any(v[in_leg] <= 0.0) or not np.all(np.isfinite(v[in_leg])):
        raise ValueError("market equity must be positive and finite for every firm in a leg")
    u_plus = np.maximum(u, 0.0)
    u_minus = np.maximum(-u, 0.0)
    s_plus = float(np.sum(u_plus * v))
    s_minus = float(np.sum(u_minus * v))
    if s_plus <= 0.0:
        raise EmptyLegError("empty long leg")
    if s_minus <= 0.0:
        raise EmptyLegError("empty short leg")
    return u_plus * v / s_plus - u_minus * v / s_minus


def factor_return(weights, returns) -> np.ndarray | float:
    """Portfolio return(s): weights @ returns.

    ``weights`` may be a single weight vector or a (P, M) matrix of rows.
    """
    w = np.asarray(weights, dtype=float)
    r = np.asarray(returns, dtype=float)
    if r.ndim != 1:
        raise ValueError(f"returns must be a vector, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("returns contain non-finite values")
    if w.shape[-1] != r.size:
        raise ValueError(f"weights {w.shape} do not conform with {r.size} returns")
    out = w @ r
    return float(out) if np.ndim(out) == 0 else out


def factor_return_with_aux(u, v, r):
    """Factor return plus the per-leg sums the backward pass reuses.

    Returns ``(f, aux)`` with ``aux = (s_plus, s_minus, ret_long,
    ret_short)`` where ``ret_long/ret_short`` are the value-weighted
    returns of each leg.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    r = np.asarray(r, dtype=float)
    u_plus = np.maximum(u, 0.0)
    u_minus = np.maximum(-u, 0.0)
    s_plus = float(np.sum(u_plus * v))
    s_minus = float(np.sum(u_minus * v))
    if s_plus <= 0.0:
        raise EmptyLegError("empty long leg")
    if s_minus <= 0.0:
        raise EmptyLegError("empty short leg")
    ret_long = float(np.sum(u_plus * v * r)) / s_plus
    ret_short = float(np.sum(u_minus * v * r)) / s_minus
    return ret_long - ret_short, (s_plus, s_minus, ret_long, ret_short)


def factor_return_vjp(df: float, u, v, r, aux) -> np.ndarray:
    """Gradient of a factor return w.r.t. its membership vector.

    ``df`` is the upstream d(loss)/d(factor return); ``aux`` comes from
    :func:`factor_return_with_aux` on the same (u, v, r).
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    r = np.asarray(r, dtype=float)
    s_plus, s_minus, ret_long, ret_short = aux
    du = np.zeros_like(u)
    pos = u > 0.0
    neg = u < 0.0
    du[pos] = v[pos] * (r[pos] - ret_long) / s_plus
    du[neg] = v[neg] * (r[neg] - ret_short) / s_minus
    return df * du
