"""Conditional pricing head: paired ReLU units over the factor space.

Each direction row a_p feeds a ReLU pair (ReLU(a_p @ x), ReLU(-a_p @ x))
with x = [f; g], so the P_cond hyperplanes a_p @ x = 0 cut the factor
space into 2**P_cond sign regions.  Inside each region the head is an
exact linear model in x whose coefficients can be read off in closed
form, which is what :func:`unwrap_regions` does; predictions remain
continuous across region boundaries because every ReLU is.

The classic up/down-market model is the one-pair special case with the
direction selecting only the market factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConditionSpec",
    "ConditionalCoeffs",
    "ConditionalHead",
    "region_index",
    "relu_pairs_forward",
    "unwrap_regions",
    "write_conditional_coeffs_csv",
]


@dataclass
class ConditionSpec:
    """Hyperplane directions that carve the [f; g] space into regions."""

    directions: np.ndarray  # (P_cond, P + D)
    n_deep: int  # P, leading entries of x
    n_benchmark: int  # D, trailing entries of x

    def __post_init__(self):
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=float))
        if self.directions.shape[1] != self.n_deep + self.n_benchmark:
            raise ValueError(
                f"directions have {self.directions.shape[1]} columns, expected "
                f"{self.n_deep} deep + {self.n_benchmark} benchmark"
            )
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("every direction row must be nonzero")

    @property
    def n_pairs(self) -> int:
        return self.directions.shape[0]

    @property
    def n_regions(self) -> int:
        return 2 ** self.n_pairs


@dataclass
class ConditionalHead:
    """Per-asset loadings on the positive and negative ReLU outputs."""

    beta_plus: np.ndarray  # (N, P_cond)
    beta_minus: np.ndarray  # (N, P_cond)

    def __post_init__(self):
        self.beta_plus = np.atleast_2d(np.asarray(self.beta_plus, dtype=float))
        self.beta_minus = np.atleast_2d(np.asarray(self.beta_minus, dtype=float))
        if self.beta_plus.shape != self.beta_minus.shape:
            raise ValueError("beta_plus and beta_minus must have identical shapes")

    @property
    def n_assets(self) -> int:
        return self.beta_plus.shape[0]

    def copy(self) -> "ConditionalHead":
        return ConditionalHead(self.beta_plus.copy(), self.beta_minus.copy())


def _stack_x(f, g, spec: ConditionSpec) -> tuple[np.ndarray, bool]:
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    single = f.ndim == 1 and g.ndim == 1
    fb = f[:, None] if f.ndim == 1 else f
    gb = g[:, None] if g.ndim == 1 else g
    if fb.shape[0] != spec.n_deep or gb.shape[0] != spec.n_benchmark:
        raise ValueError(
            f"factor blocks ({fb.shape[0]}, {gb.shape[0]}) do not match spec "
            f"({spec.n_deep}, {spec.n_benchmark})"
        )
    if fb.shape[1] != gb.shape[1]:
        raise ValueError(f"f spans {fb.shape[1]} months but g spans {gb.shape[1]}")
    return np.vstack([fb, gb]), single


def relu_pairs_forward(f, g, spec: ConditionSpec, head: ConditionalHead) -> np.ndarray:
    """Predicted returns sum_p [b+ ReLU(a_p x) + b- ReLU(-a_p x)].

    Accepts one month (vectors) or a (., T) window.
    """
    x, single = _stack_x(f, g, spec)
    if head.beta_plus.shape[1] != spec.n_pairs:
        raise ValueError(
            f"head has {head.beta_plus.shape[1]} pairs, spec has {spec.n_pairs}"
        )
    proj = spec.directions @ x  # (P_cond, T)
    out = head.beta_plus @ np.maximum(proj, 0.0) + head.beta_minus @ np.maximum(-proj, 0.0)
    return out[:, 0] if single else out


def region_index(f, g, spec: ConditionSpec) -> int | np.ndarray:
    """1-based region id from the sign pattern of the projections.

    Bit p is set when a_p @ x >= 0 (boundaries count as positive), so the
    all-positive orthant is region 2**P_cond.
    """
    x, single = _stack_x(f, g, spec)
    proj = spec.directions @ x
    bits = (proj >= 0.0).astype(np.int64)
    weights = 2 ** np.arange(spec.n_pairs, dtype=np.int64)
    q = 1 + weights @ bits
    return int(q[0]) if single else q


@dataclass
class ConditionalCoeffs:
    """Explicit per-region linear coefficients on [f; g]."""

    sign_patterns: np.ndarray  # (Q, P_cond) in {0, 1}; bit p = 1 means a_p x >= 0
    coefficients: np.ndarray  # (Q, N, P + D)
    n_deep: int
    n_benchmark: int

    def region_coeffs(self, q: int) -> np.ndarray:
        """Coefficient matrix (N, P+D) for 1-based region id ``q``."""
        return self.coefficients[q - 1]

    def predict(self, f, g, spec: ConditionSpec) -> np.ndarray:
        """Evaluate the region-wise linear model (matches the ReLU head)."""
        x, single = _stack_x(f, g, spec)
        q = np.atleast_1d(region_index(f, g, spec))
        out = np.einsum("tnk,kt->nt", self.coefficients[q - 1], x)
        return out[:, 0] if single else out


def write_conditional_coeffs_csv(coeffs: ConditionalCoeffs, asset_names, path, factor_names=None) -> None:
    """Export the per-region linear coefficients as labeled delimited text.

    One row per (region, asset); the region is identified by its sign
    pattern over the condition hyperplanes ('+' means a_p @ x >= 0).
    """
    q_count, n, k = coeffs.coefficients.shape
    if len(asset_names) != n:
        raise ValueError(f"{n} assets but {len(asset_names)} names")
    factor_names = factor_names or (
        [f"f{i + 1}" for i in range(coeffs.n_deep)] + [f"g{i + 1}" for i in range(coeffs.n_benchmark)]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("region,signs,asset," + ",".join(factor_names) + "\n")
        for q in range(q_count):
            signs = "".join("+" if b else "-" for b in coeffs.sign_patterns[q])
            for i, name in enumerate(asset_names):
                row = ",".join(repr(float(x)) for x in coeffs.coefficients[q, i])
                fh.write(f"{q + 1},{signs},{name},{row}\n")


def unwrap_regions(spec: ConditionSpec, head: ConditionalHead) -> ConditionalCoeffs:
    """Closed-form linear coefficients for each of the 2**P_cond regions.

    Where a_p @ x > 0 the pair contributes b+_p * a_p, where a_p @ x < 0
    it contributes -b-_p * a_p; a region's coefficient row is the sum of
    its pairs' contributions.
    """
    if head.beta_plus.shape[1] != spec.n_pairs:
        raise ValueError(f"head has {head.beta_plus.shape[1]} pairs, spec has {spec.n_pairs}")
    n_assets = head.n_assets
    n_pairs = spec.n_pairs
    q_count = spec.n_regions
    patterns = np.zeros((q_count, n_pairs), dtype=np.int64)
    coeffs = np.zeros((q_count, n_assets, spec.directions.shape[1]))
    for q in range(q_count):
        bits = [(q >> p) & 1 for p in range(n_pairs)]
        patterns[q] = bits
        for p, bit in enumerate(bits):
            if bit:
                coeffs[q] += head.beta_plus[:, p:p + 1] * spec.directions[p][None, :]
            else:
                coeffs[q] -= head.beta_minus[:, p:p + 1] * spec.directions[p][None, :]
    return ConditionalCoeffs(
        sign_patterns=patterns,
        coefficients=coeffs,
        n_deep=spec.n_deep,
        n_benchmark=spec.n_benchmark,
    )
