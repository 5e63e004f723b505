"""Panel ingestion, normalization, input assembly, and sample splits.

File formats (delimited text, ISO ``YYYY-MM`` dates, header row):

* firm panel:      ``date,firm_id,ret,me,c1..cK`` -- one row per active
  (firm, month); ``ret`` is the realized month-t excess return, ``me``
  the lagged market equity, ``c*`` the lagged characteristics with an
  empty field meaning missing;
* macro series:    ``date,x1..xE`` -- empty fields are forward-filled
  and flagged;
* benchmark factors: ``date,g1..gD`` -- fully observed;
* test portfolios: ``date,R1..RN`` -- fully observed.

Loading drops firms with fewer than 12 months of history, drops rows
with non-positive lagged market equity, and caps each month's universe
at the largest firms by lagged market equity.  Months in the firm panel
that any other series does not cover are an error naming the month.

Characteristics are used only through their monthly cross-sectional
rank, mapped to [-1, 1]; a missing value stays missing (NaN) and the
firm is excluded from sorting for that month.  Macro predictors are
z-scored with training-window statistics only and clipped to [-1, 1].
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .core_math import rank_ascending
from .errors import DataError, WindowViolationError

__all__ = [
    "BENCHMARK_COLUMNS",
    "MonthData",
    "PanelDataset",
    "PanelView",
    "SampleSplit",
    "SplitConfig",
    "build_input",
    "input_row_count",
    "load_panel",
    "load_series_csv",
    "month_sequence",
    "rank_normalize",
    "split_months",
    "standardize_macro",
    "write_panel",
    "write_series_csv",
]

_MONTH_RE = re.compile(r"^\d{4}-(0[1-9]|1[0-2])$")

BENCHMARK_COLUMNS = {"capm": 1, "ff3": 3, "ff4": 4}

DEFAULT_UNIVERSE_CAP = 3000
MIN_HISTORY_MONTHS = 12


def _check_month(label: str, where: str) -> str:
    if not _MONTH_RE.match(label):
        raise DataError(f"{where}: bad date {label!r}, expected YYYY-MM")
    return label


def month_sequence(start: str, n_months: int) -> list[str]:
    """``n_months`` consecutive YYYY-MM labels from ``start``."""
    _check_month(start, "month_sequence")
    year, month = int(start[:4]), int(start[5:])
    out = []
    for _ in range(n_months):
        out.append(f"{year:04d}-{month:02d}")
        month += 1
        if month == 13:
            month = 1
            year += 1
    return out


@dataclass
class PanelDataset:
    """Aligned firm-month panel plus macro, benchmark, and portfolio series.

    Firm-level arrays are (T, J) over the global firm list with NaN where
    a firm is inactive; characteristics are (K, T, J) with NaN for
    missing values.  ``access_log`` records every month served through a
    :class:`PanelView` as ``(purpose, index)`` pairs.
    """

    months: list[str]
    firm_ids: list[str]
    returns: np.ndarray  # (T, J)
    market_equity: np.ndarray  # (T, J), lagged
    characteristics: np.ndarray  # (K, T, J), lagged
    char_names: list[str]
    macro: np.ndarray  # (T, E), lagged
    macro_names: list[str]
    factors: np.ndarray  # (T, D)
    factor_names: list[str]
    portfolios: np.ndarray  # (T, N)
    portfolio_names: list[str]
    macro_filled: list[tuple[str, str]] = field(default_factory=list)
    normalized: bool = False
    macro_standardized: bool = False
    access_log: set[tuple[str, int]] = field(default_factory=set, repr=False)

    @property
    def n_months(self) -> int:
        return len(self.months)

    @property
    def n_chars(self) -> int:
        return self.characteristics.shape[0]

    @property
    def n_macro(self) -> int:
        return self.macro.shape[1]

    @property
    def n_portfolios(self) -> int:
        return self.portfolios.shape[1]

    @property
    def active(self) -> np.ndarray:
        """(T, J) boolean: firm has a return and market equity that month."""
        return ~np.isnan(self.returns)

    def month_index(self, label: str) -> int:
        try:
            return self.months.index(label)
        except ValueError:
            raise DataError(f"month {label} not in dataset") from None

    def benchmark_count(self, tag: str) -> int:
        if tag not in BENCHMARK_COLUMNS:
            raise DataError(f"unknown benchmark tag {tag!r}, expected one of {sorted(BENCHMARK_COLUMNS)}")
        d = BENCHMARK_COLUMNS[tag]
        if self.factors.shape[1] < d:
            raise DataError(f"benchmark {tag!r} needs {d} factor columns, file has {self.factors.shape[1]}")
        return d

    def view(self, allowed: range, purpose: str, benchmark: str = "capm") -> "PanelView":
        return PanelView(self, allowed, purpose, self.benchmark_count(benchmark))


@dataclass(frozen=True)
class MonthData:
    """One month's cross-section, restricted to active firms."""

    index: int
    month: str
    firm_idx: np.ndarray  # global column index of each active firm
    r: np.ndarray  # (M,) realized excess returns
    v: np.ndarray  # (M,) lagged market equity
    z: np.ndarray  # (K, M) lagged characteristics, NaN = missing
    x: np.ndarray  # (E,) lagged macro predictors
    R: np.ndarray  # (N,) test-portfolio returns
    g: np.ndarray  # (D,) benchmark factor returns
    eligible: np.ndarray  # (M,) firm has every informative characteristic

    @property
    def n_firms(self) -> int:
        return self.r.size


class PanelView:
    """Month accessor limited to a window; every access is logged.

    Training code only ever receives a view, so an attempt to read a
    month outside the permitted window raises instead of leaking data.
    """

    def __init__(self, dataset: PanelDataset, allowed: range, purpose: str, n_benchmark: int):
        self.dataset = dataset
        self.allowed = allowed
        self.purpose = purpose
        self.n_benchmark = n_benchmark

    @property
    def indices(self) -> range:
        return self.allowed

    @property
    def n_months(self) -> int:
        return len(self.allowed)

    def month(self, t: int) -> MonthData:
        if t not in self.allowed:
            raise WindowViolationError(
                f"{self.purpose}: month index {t} outside permitted window "
                f"[{self.allowed.start}, {self.allowed.stop})"
            )
        self.dataset.access_log.add((self.purpose, t))
        ds = self.dataset
        cols = np.flatnonzero(ds.active[t])
        z = ds.characteristics[:, t, cols]
        informative = ~np.all(np.isnan(z), axis=1)
        eligible = ~np.any(np.isnan(z[informative]), axis=0) if informative.any() else np.ones(cols.size, bool)
        return MonthData(
            index=t,
            month=ds.months[t],
            firm_idx=cols,
            r=ds.returns[t, cols],
            v=ds.market_equity[t, cols],
            z=z,
            x=ds.macro[t],
            R=ds.portfolios[t],
            g=ds.factors[t, : self.n_benchmark],
            eligible=eligible,
        )


# ---------------------------------------------------------------------------
# CSV reading / writing
# ---------------------------------------------------------------------------


def _read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            rows = [(line, row) for line, row in enumerate(reader, start=1) if row]
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0][1]]
    return header, rows[1:]


def _parse_float(token: str, path, line: int, col: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise DataError(f"{path}:{line}: unparseable value {token!r} in column {col}") from None


def load_series_csv(path, prefix: str, allow_missing: bool):
    """Load a ``date,<prefix>1..<prefix>K`` file into (months, names, values)."""
    header, rows = _read_rows(path)
    if len(header) < 2 or header[0] != "date":
        raise DataError(f"{path}:1: schema mismatch, expected header 'date,{prefix}1..'")
    names = header[1:]
    months: list[str] = []
    values = np.empty((len(rows), len(names)))
    filled: list[tuple[str, str]] = []
    for i, (line, row) in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        label = _check_month(row[0].strip(), f"{path}:{line}")
        if months and label <= months[-1]:
            raise DataError(f"{path}:{line}: non-increasing date {label}")
        months.append(label)
        for j, tok in enumerate(row[1:]):
            tok = tok.strip()
            if tok == "":
                if not allow_missing:
                    raise DataError(f"{path}:{line}: missing value in column {names[j]}")
                if i == 0:
                    raise DataError(f"{path}:{line}: column {names[j]} missing in first month, cannot forward-fill")
                values[i, j] = values[i - 1, j]
                filled.append((label, names[j]))
            else:
                values[i, j] = _parse_float(tok, path, line, names[j])
    return months, names, values, filled


def load_panel(
    firm_path,
    macro_path,
    factor_path,
    portfolio_path,
    universe_cap: int = DEFAULT_UNIVERSE_CAP,
    min_history: int = MIN_HISTORY_MONTHS,
) -> PanelDataset:
    """Load and align the four input files into a :class:`PanelDataset`."""
    header, rows = _read_rows(firm_path)
    if len(header) < 5 or header[:4] != ["date", "firm_id", "ret", "me"]:
        raise DataError(f"{firm_path}:1: schema mismatch, expected header 'date,firm_id,ret,me,c1..cK'")
    char_names = header[4:]
    k = len(char_names)

    records: dict[tuple[str, str], tuple[float, float, list[float]]] = {}
    months_seen: list[str] = []
    firm_set: dict[str, None] = {}
    for line, row in rows:
        if len(row) != len(header):
            raise DataError(f"{firm_path}:{line}: expected {len(header)} fields, got {len(row)}")
        label = _check_month(row[0].strip(), f"{firm_path}:{line}")
        if months_seen and label < months_seen[-1]:
            raise DataError(f"{firm_path}:{line}: non-increasing date {label}")
        if not months_seen or label != months_seen[-1]:
            months_seen.append(label)
        firm = row[1].strip()
        if not firm:
            raise DataError(f"{firm_path}:{line}: empty firm_id")
        key = (label, firm)
        if key in records:
            raise DataError(f"{firm_path}:{line}: duplicate row for firm {firm} in {label}")
        ret = _parse_float(row[2].strip(), firm_path, line, "ret")
        me = _parse_float(row[3].strip(), firm_path, line, "me")
        chars = [
            np.nan if tok.strip() == "" else _parse_float(tok.strip(), firm_path, line, char_names[j])
            for j, tok in enumerate(row[4:])
        ]
        if me <= 0.0:  # non-positive lagged market equity is excluded, not fatal
            continue
        records[key] = (ret, me, chars)
        firm_set[firm] = None

    months = months_seen
    if not months:
        raise DataError(f"{firm_path}: no usable firm rows")
    firm_ids = sorted(firm_set)

    macro_months, macro_names, macro_vals, macro_filled = load_series_csv(macro_path, "x", allow_missing=True)
    factor_months, factor_names, factor_vals, _ = load_series_csv(factor_path, "g", allow_missing=False)
    port_months, port_names, port_vals, _ = load_series_csv(portfolio_path, "R", allow_missing=False)

    def align(series_months, series_vals, path) -> np.ndarray:
        index = {m: i for i, m in enumerate(series_months)}
        missing = [m for m in months if m not in index]
        if missing:
            raise DataError(f"{path}: month {missing[0]} required by the firm panel is absent")
        return series_vals[[index[m] for m in months]]

    macro = align(macro_months, macro_vals, macro_path)
    factors = align(factor_months, factor_vals, factor_path)
    portfolios = align(port_months, port_vals, portfolio_path)
    macro_filled = [(m, c) for m, c in macro_filled if m in set(months)]

    t_len, j_len = len(months), len(firm_ids)
    returns = np.full((t_len, j_len), np.nan)
    market_equity = np.full((t_len, j_len), np.nan)
    characteristics = np.full((k, t_len, j_len), np.nan)
    col = {fid: j for j, fid in enumerate(firm_ids)}
    row_idx = {m: t for t, m in enumerate(months)}
    for (label, firm), (ret, me, chars) in records.items():
        t, j = row_idx[label], col[firm]
        returns[t, j] = ret
        market_equity[t, j] = me
        characteristics[:, t, j] = chars

    # listing filter analog: a firm needs at least `min_history` active months
    history = np.sum(~np.isnan(returns), axis=0)
    short = history < min_history
    if np.any(short):
        returns[:, short] = np.nan
        market_equity[:, short] = np.nan
        characteristics[:, :, short] = np.nan
        keep = ~short
        firm_ids = [fid for fid, k_ in zip(firm_ids, keep) if k_]
        returns = returns[:, keep]
        market_equity = market_equity[:, keep]
        characteristics = characteristics[:, :, keep]

    if not firm_ids:
        raise DataError(f"{firm_path}: no firm has {min_history}+ months of history")

    # universe cap: keep the largest `universe_cap` firms by lagged ME per month
    for t in range(t_len):
        active = np.flatnonzero(~np.isnan(market_equity[t]))
        if active.size > universe_cap:
            order = np.argsort(-market_equity[t, active], kind="stable")
            drop = active[order[universe_cap:]]
            returns[t, drop] = np.nan
            market_equity[t, drop] = np.nan
            characteristics[:, t, drop] = np.nan

    return PanelDataset(
        months=months,
        firm_ids=firm_ids,
        returns=returns,
        market_equity=market_equity,
        characteristics=characteristics,
        char_names=char_names,
        macro=macro,
        macro_names=macro_names,
        factors=factors,
        factor_names=factor_names,
        portfolios=portfolios,
        portfolio_names=port_names,
        macro_filled=macro_filled,
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def write_series_csv(path, months: list[str], names: list[str], values: np.ndarray) -> None:
    """Write a ``date,<names>`` file in canonical (round-tripping) form."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("date," + ",".join(names) + "\n")
        for t, m in enumerate(months):
            fh.write(m + "," + ",".join(_fmt(v) for v in values[t]) + "\n")


def write_panel(dataset: PanelDataset, firm_path, macro_path, factor_path, portfolio_path) -> None:
    """Write the dataset back out in canonical form.

    Loading a written set and writing it again reproduces the files byte
    for byte: rows are ordered by month then firm id, and floats use
    shortest round-trip formatting.
    """
    with open(firm_path, "w", newline="", encoding="utf-8") as fh:
        fh.write("date,firm_id,ret,me," + ",".join(dataset.char_names) + "\n")
        for t, m in enumerate(dataset.months):
            for j in np.flatnonzero(dataset.active[t]):
                chars = ",".join(
                    "" if np.isnan(c) else _fmt(c) for c in dataset.characteristics[:, t, j]
                )
                fh.write(
                    f"{m},{dataset.firm_ids[j]},{_fmt(dataset.returns[t, j])},"
                    f"{_fmt(dataset.market_equity[t, j])},{chars}\n"
                )
    write_series_csv(macro_path, dataset.months, dataset.macro_names, dataset.macro)
    write_series_csv(factor_path, dataset.months, dataset.factor_names, dataset.factors)
    write_series_csv(portfolio_path, dataset.months, dataset.portfolio_names, dataset.portfolios)


# ---------------------------------------------------------------------------
# Normalization and input assembly
# ---------------------------------------------------------------------------


def rank_normalize(dataset: PanelDataset) -> PanelDataset:
    """Map each characteristic, each month, to cross-sectional ranks in [-1, 1].

    Rank r of M non-missing firms becomes (2r - M - 1)/(M - 1); missing
    values stay missing.  A month with fewer than two non-missing firms
    for a characteristic has that characteristic masked entirely.  The
    mapping is idempotent and invariant to strictly monotone transforms
    of the raw characteristic.
    """
    chars = dataset.characteristics.copy()
    k_len, t_len, _ = chars.shape
    for t in range(t_len):
        for k in range(k_len):
            col = chars[k, t]
            ok = ~np.isnan(col)
            m = int(ok.sum())
            if m < 2:
                chars[k, t] = np.nan
                continue
            ranks = rank_ascending(col[ok])
            chars[k, t, ok] = (2.0 * ranks - m - 1.0) / (m - 1.0)
    return replace(dataset, characteristics=chars, normalized=True, access_log=dataset.access_log)


def standardize_macro(dataset: PanelDataset, train_indices: range) -> PanelDataset:
    """Z-score macro predictors with training-window statistics, clip to [-1, 1].

    Only training months enter the mean and standard deviation, so later
    windows carry no look-ahead.  A constant training column becomes 0.
    """
    if len(train_indices) < 2:
        raise DataError("macro standardization needs at least 2 training months")
    macro = dataset.macro.copy()
    train = macro[train_indices.start: train_indices.stop]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    out = np.zeros_like(macro)
    nonconst = std > 0.0
    out[:, nonconst] = (macro[:, nonconst] - mean[nonconst]) / std[nonconst]
    return replace(
        dataset,
        macro=np.clip(out, -1.0, 1.0),
        macro_standardized=True,
        access_log=dataset.access_log,
    )


def input_row_count(n_chars: int, n_macro: int) -> int:
    return n_chars + n_macro + n_chars * n_macro


def build_input(z, x) -> tuple[np.ndarray, np.ndarray]:
    """Stack one month's input block: characteristics, macro, interactions.

    Rows are the K characteristics, then the E macro predictors broadcast
    across firms, then the K*E products z_k * x_e ordered macro-major
    (all k for e=1, then all k for e=2, ...).  Missing characteristics contribute
    exact zeros to their own rows and to every interaction row; the
    returned mask marks those entries.
    """
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    if z.ndim != 2 or x.ndim != 1:
        raise ValueError(f"expected z as (K, M) and x as (E,), got {z.shape} and {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("macro predictors must be finite")
    k, m = z.shape
    e = x.size
    z_mask = np.isnan(z)
    z_filled = np.where(z_mask, 0.0, z)
    blocks = [z_filled, np.tile(x[:, None], (1, m))]
    mask_blocks = [z_mask, np.zeros((e, m), dtype=bool)]
    for xe in x:
        blocks.append(z_filled * xe)
        mask_blocks.append(z_mask)
    z0 = np.vstack(blocks) if blocks else np.zeros((0, m))
    mask = np.vstack(mask_blocks)
    assert z0.shape[0] == input_row_count(k, e)
    return z0, mask


# ---------------------------------------------------------------------------
# Sample splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitConfig:
    """Split by boundary months (inclusive ends) or by fractions."""

    train_end: str | None = "2002-12"
    val_end: str | None = "2010-12"
    fractions: tuple[float, float] | None = None  # (train, validation) shares


@dataclass(frozen=True)
class SampleSplit:
    """Disjoint, contiguous, ordered train < validation < test windows."""

    train: range
    validation: range
    test: range

    def __post_init__(self):
        if not (self.train.stop == self.validation.start and self.validation.stop == self.test.start):
            raise DataError("split windows must be contiguous and ordered train < validation < test")
        if min(len(self.train), len(self.validation), len(self.test)) == 0:
            raise DataError("every split window must be nonempty")

    @property
    def train_and_validation(self) -> range:
        return range(self.train.start, self.validation.stop)

    @property
    def n_months(self) -> int:
        return self.test.stop - self.train.start


def split_months(months: list[str], config: SplitConfig) -> SampleSplit:
    """Cut a month list into train/validation/test windows."""
    t_len = len(months)
    if config.fractions is not None:
        f_train, f_val = config.fractions
        if f_train <= 0 or f_val <= 0 or f_train + f_val >= 1:
            raise DataError(f"fractions must be positive and sum below 1, got {config.fractions}")
        a = int(np.floor(t_len * f_train))
        b = a + int(np.floor(t_len * f_val))
    else:
        if config.train_end is None or config.val_end is None:
            raise DataError("split needs boundary months or fractions")
        if config.val_end <= config.train_end:
            raise DataError(
                f"validation end {config.val_end} must come after train end {config.train_end}"
            )
        a = np.searchsorted(months, config.train_end, side="right")
        b = np.searchsorted(months, config.val_end, side="right")
    return SampleSplit(train=range(0, int(a)), validation=range(int(a), int(b)), test=range(int(b), t_len))
