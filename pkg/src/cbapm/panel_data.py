"""Firm-month panel and macro series: ingestion, lagging, screening,
imputation and normalisation.

Months are integer indices counted from January 1994 (``1994-01`` is 0), so
window arithmetic is plain integer arithmetic.
"""

from __future__ import annotations

import json
import logging
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

EPOCH_YEAR = 1994
FREQUENCY_LAG = {"monthly": 0, "quarterly": 3, "annual": 6}
ROLES = ("characteristic", "consensus", "size", "return")

_DATE_RE = re.compile(r"^\s*(\d{4})-(\d{1,2})\s*$")


class PanelError(ValueError):
    """Raised for malformed panel input or impossible preprocessing."""


def month_index(label: str) -> int:
    """``"1994-01"`` -> 0, ``"2010-12"`` -> 203."""
    m = _DATE_RE.match(str(label))
    if not m:
        raise PanelError(f"bad date {label!r}, expected YYYY-MM")
    year, month = int(m.group(1)), int(m.group(2))
    if not 1 <= month <= 12:
        raise PanelError(f"bad month in date {label!r}")
    return (year - EPOCH_YEAR) * 12 + month - 1


def month_label(index: int) -> str:
    year, month = divmod(int(index), 12)
    return f"{EPOCH_YEAR + year:04d}-{month + 1:02d}"


# ---------------------------------------------------------------------------
# types


@dataclass
class VariableMeta:
    name: str
    frequency: str = "monthly"
    is_growth_rate: bool = False
    coverage_start: int | None = None
    missing_rate: float | None = None
    role: str = "characteristic"

    def __post_init__(self) -> None:
        if self.frequency not in FREQUENCY_LAG:
            raise PanelError(f"{self.name}: unknown frequency {self.frequency!r}")
        if self.missing_rate is not None and not 0.0 <= self.missing_rate <= 1.0:
            raise PanelError(f"{self.name}: missing_rate must lie in [0, 1]")

    @property
    def lag(self) -> int:
        return FREQUENCY_LAG[self.frequency]


@dataclass
class Panel:
    """Long-format firm-month panel.

    ``data`` holds ``firm_id`` and ``month`` plus one column per variable,
    sorted by ``(firm_id, month)``. Missing cells are NaN. ``returns`` maps a
    horizon ``h`` to the column holding the excess return realised over
    ``(t, t+h]`` for the row dated ``t``.
    """

    data: pd.DataFrame
    characteristics: list[str]
    consensus: list[str]
    size: str | None = None
    returns: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.data = self.data.sort_values(["firm_id", "month"], kind="mergesort").reset_index(drop=True)

    @property
    def firm_ids(self) -> np.ndarray:
        return self.data["firm_id"].unique()

    @property
    def months(self) -> np.ndarray:
        return np.sort(self.data["month"].unique())

    @property
    def variables(self) -> list[str]:
        cols = [*self.characteristics, *self.consensus]
        if self.size:
            cols.append(self.size)
        cols.extend(self.returns[h] for h in sorted(self.returns))
        return cols

    @property
    def missing_mask(self) -> pd.DataFrame:
        return self.data[self.variables].isna()

    def __len__(self) -> int:
        return len(self.data)

    def with_data(self, data: pd.DataFrame, **changes) -> "Panel":
        return replace(self, data=data, **changes)

    def copy(self) -> "Panel":
        return replace(
            self,
            data=self.data.copy(),
            characteristics=list(self.characteristics),
            consensus=list(self.consensus),
            returns=dict(self.returns),
        )

    def slice_months(self, start: int | None = None, end: int | None = None) -> "Panel":
        """Rows with ``start <= month <= end`` (either bound optional)."""
        m = self.data["month"]
        keep = np.ones(len(m), dtype=bool)
        if start is not None:
            keep &= (m >= start).to_numpy()
        if end is not None:
            keep &= (m <= end).to_numpy()
        return self.with_data(self.data.loc[keep].reset_index(drop=True))


@dataclass
class MacroMatrix:
    months: np.ndarray
    values: np.ndarray
    names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.months = np.asarray(self.months, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.months):
            raise PanelError("macro values must be a (months x variables) matrix")
        if len(self.months) and np.any(np.diff(self.months) != 1):
            raise PanelError("macro months must be contiguous and increasing")
        if not self.names:
            self.names = [f"m{j + 1}" for j in range(self.values.shape[1])]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def rows(self, months: Iterable[int]) -> np.ndarray:
        months = np.asarray(list(months) if not isinstance(months, np.ndarray) else months, dtype=int)
        pos = months - self.months[0]
        if len(pos) and (pos.min() < 0 or pos.max() >= len(self.months)):
            raise PanelError("requested months fall outside the macro series")
        return self.values[pos]

    def slice_months(self, start: int, end: int) -> "MacroMatrix":
        keep = (self.months >= start) & (self.months <= end)
        return MacroMatrix(self.months[keep], self.values[keep], list(self.names))


@dataclass
class Schema:
    firm_id: str
    date: str
    meta: list[VariableMeta]
    size: str | None
    returns: dict[int, str]

    @property
    def characteristics(self) -> list[str]:
        return [m.name for m in self.meta if m.role == "characteristic"]

    @property
    def consensus(self) -> list[str]:
        return [m.name for m in self.meta if m.role == "consensus"]

    def to_json(self) -> dict:
        variables: dict[str, dict] = {}
        for m in self.meta:
            variables[m.name] = {"role": m.role, "frequency": m.frequency, "is_growth_rate": m.is_growth_rate}
        if self.size:
            variables[self.size] = {"role": "size"}
        for h, col in sorted(self.returns.items()):
            variables[col] = {"role": "return", "horizon": h}
        return {"firm_id": self.firm_id, "date": self.date, "variables": variables}


# ---------------------------------------------------------------------------
# ingestion


def load_schema(path: str | Path) -> Schema:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return parse_schema(doc)


def parse_schema(doc: dict) -> Schema:
    meta: list[VariableMeta] = []
    size = None
    returns: dict[int, str] = {}
    for name, spec in doc.get("variables", {}).items():
        role = spec.get("role")
        if role not in ROLES:
            raise PanelError(f"variable {name!r}: unknown role {role!r}")
        if role == "size":
            if size is not None:
                raise PanelError("schema declares more than one size column")
            size = name
        elif role == "return":
            h = int(spec.get("horizon", 1))
            if h in returns:
                raise PanelError(f"schema declares two return columns for horizon {h}")
            returns[h] = name
        else:
            default_freq = "annual" if role == "consensus" else "monthly"
            meta.append(
                VariableMeta(
                    name=name,
                    frequency=spec.get("frequency", default_freq),
                    is_growth_rate=bool(spec.get("is_growth_rate", False)),
                    role=role,
                )
            )
    return Schema(doc.get("firm_id", "firm_id"), doc.get("date", "date"), meta, size, returns)


def _to_float(text: pd.Series) -> pd.Series:
    """Parse numeric strings exactly (shortest-repr round trip); blanks become NaN.

    Unparseable cells come back as NaN so callers can report their rows.
    """
    arr = text.where(text != "", "nan").to_numpy(dtype=str)
    try:
        return pd.Series(arr.astype(float), index=text.index)
    except ValueError:
        out = pd.to_numeric(text.where(text != ""), errors="coerce")
        ok = out.notna().to_numpy()
        out[ok] = arr[ok].astype(float)
        return out.astype(float)


def load_panel(path: str | Path, schema: Schema) -> Panel:
    """Read a ``firm_id,date,<vars...>`` CSV into a :class:`Panel`."""
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    wanted = [m.name for m in schema.meta]
    if schema.size:
        wanted.append(schema.size)
    wanted.extend(schema.returns.values())
    missing_cols = [c for c in [schema.firm_id, schema.date, *wanted] if c not in raw.columns]
    if missing_cols:
        raise PanelError(f"{path}: missing columns {missing_cols}")

    out = pd.DataFrame({"firm_id": raw[schema.firm_id].str.strip()})
    months = np.empty(len(raw), dtype=int)
    for i, label in enumerate(raw[schema.date]):
        try:
            months[i] = month_index(label)
        except PanelError as exc:
            raise PanelError(f"{path}: row {i + 2}: {exc}") from None
    out["month"] = months
    if (out["firm_id"] == "").any():
        row = int(np.flatnonzero(out["firm_id"] == "")[0])
        raise PanelError(f"{path}: row {row + 2}: empty firm id")
    for col in wanted:
        text = raw[col].str.strip()
        values = _to_float(text)
        bad = values.isna() & (text != "") & (text.str.lower() != "nan")
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise PanelError(f"{path}: row {row + 2}: column {col!r} is not a number: {text.iloc[row]!r}")
        out[col] = values.astype(float)

    dup = out.duplicated(["firm_id", "month"], keep="first")
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        raise PanelError(
            f"{path}: row {row + 2}: duplicate (firm, month) key "
            f"({out['firm_id'].iloc[row]}, {month_label(out['month'].iloc[row])})"
        )
    return Panel(out, schema.characteristics, schema.consensus, schema.size, dict(schema.returns))


def load_macro(path: str | Path) -> MacroMatrix:
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    if "date" not in raw.columns:
        raise PanelError(f"{path}: macro CSV needs a 'date' column")
    months = []
    for i, label in enumerate(raw["date"]):
        try:
            months.append(month_index(label))
        except PanelError as exc:
            raise PanelError(f"{path}: row {i + 2}: {exc}") from None
    names = [c for c in raw.columns if c != "date"]
    values = raw[names].apply(lambda s: _to_float(s.str.strip()))
    order = np.argsort(months, kind="stable")
    return MacroMatrix(np.asarray(months)[order], values.to_numpy(dtype=float)[order], names)


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def write_panel_csv(panel: Panel, path: str | Path) -> None:
    df = panel.data
    cols = panel.variables
    lines = [",".join(["firm_id", "date", *cols])]
    labels = [month_label(m) for m in df["month"]]
    values = df[cols].to_numpy(dtype=float)
    for fid, lab, row in zip(df["firm_id"], labels, values):
        lines.append(",".join([str(fid), lab, *(_fmt(v) for v in row)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_macro_csv(macro: MacroMatrix, path: str | Path) -> None:
    lines = [",".join(["date", *macro.names])]
    for m, row in zip(macro.months, macro.values):
        lines.append(",".join([month_label(m), *(_fmt(v) for v in row)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# preprocessing


def _meta_map(meta: Sequence[VariableMeta]) -> dict[str, VariableMeta]:
    return {m.name: m for m in meta}


def describe_variables(panel: Panel, meta: Sequence[VariableMeta]) -> list[VariableMeta]:
    """Fill ``coverage_start`` and ``missing_rate`` from the (raw) panel."""
    out = []
    df = panel.data
    for m in meta:
        if m.name not in df.columns:
            raise PanelError(f"meta refers to unknown variable {m.name!r}")
        col = df[m.name]
        observed = df.loc[col.notna(), "month"]
        start = int(observed.min()) if len(observed) else None
        rate = float(col.isna().mean()) if len(col) else 0.0
        out.append(replace(m, coverage_start=start, missing_rate=rate))
    return out


def lag_characteristics(panel: Panel, meta: Sequence[VariableMeta]) -> Panel:
    """Shift each variable forward by its publication lag (0/3/6 months).

    Consensus columns without a meta entry are treated as annual.
    """
    by_name = _meta_map(meta)
    cols = set(panel.characteristics) | set(panel.consensus)
    unknown = sorted(set(by_name) - cols)
    if unknown:
        raise PanelError(f"meta refers to unknown variables {unknown}")
    uncovered = [c for c in panel.characteristics if c not in by_name]
    if uncovered:
        raise PanelError(f"no frequency declared for characteristics {uncovered}")

    lags: dict[int, list[str]] = {}
    for c in panel.characteristics:
        lags.setdefault(by_name[c].lag, []).append(c)
    for c in panel.consensus:
        lag = by_name[c].lag if c in by_name else FREQUENCY_LAG["annual"]
        lags.setdefault(lag, []).append(c)

    df = panel.data.copy()
    keys = df[["firm_id", "month"]]
    for lag, group in lags.items():
        if lag == 0:
            continue
        shifted = panel.data[["firm_id", "month", *group]].copy()
        shifted["month"] = shifted["month"] + lag
        merged = keys.merge(shifted, how="left", on=["firm_id", "month"])
        df[group] = merged[group].to_numpy()
    return panel.with_data(df)


def screen_firms(panel: Panel) -> Panel:
    """Keep firms with at least one observation in every consensus column."""
    df = panel.data
    if df.empty or not panel.consensus:
        return panel.copy()
    has = df[panel.consensus].notna().groupby(df["firm_id"], sort=False).any().all(axis=1)
    keep = df["firm_id"].map(has).fillna(False).to_numpy(dtype=bool)
    return panel.with_data(df.loc[keep].reset_index(drop=True))


def select_variables(
    panel: Panel,
    meta: Sequence[VariableMeta],
    max_missing: float = 0.20,
    latest_start: int = 0,
) -> tuple[Panel, list[VariableMeta]]:
    """Drop characteristics that are too sparse or start too late.

    The missing rate is measured on ``panel``; the coverage start comes from
    ``meta`` when recorded there (raw, pre-lag data) and from ``panel``
    otherwise.
    """
    by_name = _meta_map(meta)
    df = panel.data
    kept: list[str] = []
    for c in panel.characteristics:
        col = df[c]
        rate = float(col.isna().mean()) if len(col) else 0.0
        m = by_name.get(c)
        start = m.coverage_start if m is not None and m.coverage_start is not None else None
        if start is None:
            obs = df.loc[col.notna(), "month"]
            start = int(obs.min()) if len(obs) else None
        if rate > max_missing:
            logger.info("dropping %s: %.1f%% missing", c, 100 * rate)
            continue
        if start is None or start > latest_start:
            logger.info("dropping %s: coverage starts at %s", c, None if start is None else month_label(start))
            continue
        kept.append(c)
    dropped = set(panel.characteristics) - set(kept)
    data = df.drop(columns=sorted(dropped))
    new_meta = [m for m in meta if m.name not in dropped]
    return panel.with_data(data, characteristics=kept), new_meta


def _cross_sectional_fill(df: pd.DataFrame, col: str, values: pd.Series) -> pd.Series:
    if not values.isna().any():
        return values
    month_mean = values.groupby(df["month"]).transform("mean")
    filled = values.fillna(month_mean)
    if filled.isna().any():
        month = int(df.loc[filled.isna(), "month"].iloc[0])
        raise PanelError(
            f"cannot impute {col!r} in {month_label(month)}: no firm has a value that month"
        )
    return filled


def _interpolate_interior(df: pd.DataFrame, col: str) -> pd.Series:
    """Linear interpolation in month index between a firm's observed points."""
    v = df[col]
    obs_month = df["month"].where(v.notna()).astype(float)
    g_month = obs_month.groupby(df["firm_id"], sort=False)
    g_val = v.groupby(df["firm_id"], sort=False)
    m0, v0 = g_month.ffill(), g_val.ffill()
    m1, v1 = g_month.bfill(), g_val.bfill()
    span = (m1 - m0).to_numpy()
    t = df["month"].to_numpy(dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(span > 0, (t - m0.to_numpy()) / span, 0.0)
    interp = v0.to_numpy() + w * (v1.to_numpy() - v0.to_numpy())
    return v.fillna(pd.Series(interp, index=v.index))


def impute(panel: Panel, meta: Sequence[VariableMeta]) -> Panel:
    """Fill every missing characteristic and consensus cell.

    * level characteristics: last observation carried forward within firm;
    * growth-rate characteristics: the firm's time-series mean;
    * consensus: linear interpolation between the firm's observed points;
    * anything left: cross-sectional mean of the same month.
    """
    by_name = _meta_map(meta)
    df = panel.data.copy()
    groups = df.groupby("firm_id", sort=False)
    for c in panel.characteristics:
        if not df[c].isna().any():
            continue
        m = by_name.get(c)
        if m is not None and m.is_growth_rate:
            within = df[c].fillna(groups[c].transform("mean"))
        else:
            within = groups[c].ffill()
        df[c] = _cross_sectional_fill(df, c, within)
    for c in panel.consensus:
        if not df[c].isna().any():
            continue
        df[c] = _cross_sectional_fill(df, c, _interpolate_interior(df, c))
    return panel.with_data(df)


def rank_normalize(panel: Panel, columns: Sequence[str] | None = None) -> Panel:
    """Cross-sectional average ranks mapped onto [-1, 1] month by month.

    Rank ``r`` of ``n`` becomes ``2 (r - 1) / (n - 1) - 1``; a lone firm gets 0.
    """
    cols = list(columns) if columns is not None else [*panel.characteristics, *panel.consensus]
    df = panel.data.copy()
    if df.empty:
        return panel.with_data(df)
    by_month = df.groupby("month", sort=False)
    for c in cols:
        r = by_month[c].rank(method="average").to_numpy()
        n = by_month[c].transform("count").to_numpy(dtype=float)
        with np.errstate(invalid="ignore", divide="ignore"):
            scaled = np.where(n > 1, 2.0 * (r - 1.0) / (n - 1.0) - 1.0, 0.0)
        df[c] = np.where(np.isnan(r), np.nan, scaled)
    return panel.with_data(df)


@dataclass
class MinMaxScaler:
    lo: np.ndarray
    hi: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        span = self.hi - self.lo
        const = span <= 0
        safe = np.where(const, 1.0, span)
        out = 2.0 * (values - self.lo) / safe - 1.0
        out[..., const] = 0.0
        return np.clip(out, -1.0, 1.0)


def fit_minmax(macro: MacroMatrix, fit_range: tuple[int, int]) -> MinMaxScaler:
    start, end = fit_range
    fit = macro.slice_months(start, end)
    if len(fit.months) == 0:
        raise PanelError(f"empty macro fit range {month_label(start)}..{month_label(end)}")
    if np.isnan(fit.values).any():
        raise PanelError("macro series has missing values inside the fit range")
    lo, hi = fit.values.min(axis=0), fit.values.max(axis=0)
    const = [fit.names[j] for j in np.flatnonzero(hi <= lo)]
    if const:
        warnings.warn(f"constant macro columns on fit range mapped to 0: {const}", RuntimeWarning, stacklevel=2)
    return MinMaxScaler(lo, hi)


def minmax_normalize_macro(macro: MacroMatrix, fit_range: tuple[int, int]) -> MacroMatrix:
    """Affine map fitted on ``fit_range`` (inclusive months) sending the
    column min to -1 and max to +1; values outside are clamped."""
    scaler = fit_minmax(macro, fit_range)
    return MacroMatrix(macro.months.copy(), scaler.transform(macro.values), list(macro.names))


def preprocess_panel(
    panel: Panel,
    meta: Sequence[VariableMeta],
    *,
    max_missing: float = 0.20,
    latest_start: int = 0,
    keep_characteristics: Sequence[str] | None = None,
) -> tuple[Panel, list[VariableMeta]]:
    """Screen, select, impute and rank-normalise an already lagged panel.

    ``keep_characteristics`` pins the characteristic set (used to build test
    inputs with exactly the columns a model was trained on).
    """
    p = screen_firms(panel)
    if keep_characteristics is None:
        p, meta = select_variables(p, meta, max_missing=max_missing, latest_start=latest_start)
    else:
        keep = list(keep_characteristics)
        missing = [c for c in keep if c not in p.characteristics]
        if missing:
            raise PanelError(f"panel lacks characteristics {missing}")
        p = p.with_data(p.data.drop(columns=[c for c in p.characteristics if c not in keep]), characteristics=keep)
        meta = [m for m in meta if m.name in set(keep) | set(p.consensus)]
    p = impute(p, meta)
    p = rank_normalize(p)
    return p, list(meta)
