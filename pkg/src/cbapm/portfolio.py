"""Forecast-sorted portfolios, long-short backtests and performance statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

N_DECILES = 10
WEIGHT_TOL = 1e-9


def _sorted_groups(scores: np.ndarray, firm_ids: np.ndarray, n_groups: int) -> np.ndarray:
    """Equal-count groups 1..n_groups by ascending score, ties broken by firm id.

    The item at sorted position ``p`` (0-based) lands in group
    ``1 + #{k : floor(n*k/n_groups) <= p}``.
    """
    n = len(scores)
    order = np.lexsort((firm_ids, scores))
    cutoffs = (n * np.arange(1, n_groups)) // n_groups
    groups = np.empty(n, dtype=int)
    groups[order] = 1 + np.searchsorted(cutoffs, np.arange(n), side="right")
    return groups


def _value_weights(groups: np.ndarray, sizes: np.ndarray, n_groups: int) -> np.ndarray:
    totals = np.bincount(groups, weights=sizes, minlength=n_groups + 1)
    return sizes / totals[groups]


@dataclass
class DecileSort:
    firm_ids: np.ndarray
    groups: np.ndarray  # 1..10
    weights: np.ndarray  # within-group value weights

    def group_returns(self, returns: np.ndarray) -> np.ndarray:
        returns = np.asarray(returns, dtype=float)
        if not np.all(np.isfinite(returns)):
            raise ValueError("portfolio member returns must be finite")
        return np.bincount(self.groups, weights=self.weights * returns, minlength=N_DECILES + 1)[1:]

    def leg(self, group: int) -> dict[str, float]:
        m = self.groups == group
        return dict(zip(self.firm_ids[m].tolist(), self.weights[m].tolist()))


def _check_inputs(scores, sizes, firm_ids, minimum: int, what: str):
    scores = np.asarray(scores, dtype=float)
    sizes = np.asarray(sizes, dtype=float)
    n = len(scores)
    firm_ids = np.asarray(firm_ids if firm_ids is not None else np.arange(n))
    if not (len(sizes) == len(firm_ids) == n):
        raise ValueError("scores, sizes and firm ids must align")
    if n < minimum:
        raise ValueError(f"{what} needs at least {minimum} firms, got {n}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all(np.isfinite(sizes) & (sizes > 0)):
        raise ValueError("sizes must be finite and positive")
    return scores, sizes, firm_ids


def decile_sort(scores, sizes, firm_ids=None) -> DecileSort:
    """Value-weighted decile portfolios from one month's cross-section."""
    scores, sizes, firm_ids = _check_inputs(scores, sizes, firm_ids, N_DECILES, "a decile sort")
    groups = _sorted_groups(scores, firm_ids, N_DECILES)
    return DecileSort(firm_ids, groups, _value_weights(groups, sizes, N_DECILES))


@dataclass
class DoubleSort:
    """One month of a 5x5 sort: rows by the first score, columns by the second."""

    cells: np.ndarray  # (5, 5) value-weighted returns, NaN for empty cells
    degenerate: bool

    @property
    def row_spreads(self) -> np.ndarray:
        return self.cells[:, -1] - self.cells[:, 0]

    @property
    def col_spreads(self) -> np.ndarray:
        return self.cells[-1, :] - self.cells[0, :]


def double_sort(first, second, sizes, returns, firm_ids=None, mode: str = "conditional") -> DoubleSort:
    """Quintiles on ``first`` then (conditionally or independently) on ``second``.

    A constant ``first`` score is flagged ``degenerate``: its quintiles are
    then arbitrary equal-count groups ordered by firm id.
    """
    if mode not in ("conditional", "independent"):
        raise ValueError(f"unknown double-sort mode {mode!r}")
    first, sizes, firm_ids = _check_inputs(first, sizes, firm_ids, 25, "a double sort")
    second = np.asarray(second, dtype=float)
    returns = np.asarray(returns, dtype=float)
    if len(second) != len(first) or len(returns) != len(first):
        raise ValueError("both scores, sizes and returns must align")
    rows = _sorted_groups(first, firm_ids, 5)
    if mode == "independent":
        cols = _sorted_groups(second, firm_ids, 5)
    else:
        cols = np.empty_like(rows)
        for g in range(1, 6):
            m = rows == g
            cols[m] = _sorted_groups(second[m], firm_ids[m], 5)
    cells = np.full((5, 5), np.nan)
    for i in range(5):
        for j in range(5):
            m = (rows == i + 1) & (cols == j + 1)
            if m.any():
                cells[i, j] = np.sum(sizes[m] * returns[m]) / np.sum(sizes[m])
    return DoubleSort(cells, bool(np.ptp(first) == 0.0))


def double_sort_table(sorts: Sequence[DoubleSort]) -> pd.DataFrame:
    """Time-series mean of cell returns with H-L margins along both sorts."""
    cells = np.nanmean(np.stack([s.cells for s in sorts]), axis=0)
    table = np.full((6, 6), np.nan)
    table[:5, :5] = cells
    table[:5, 5] = np.nanmean(np.stack([s.row_spreads for s in sorts]), axis=0)
    table[5, :5] = np.nanmean(np.stack([s.col_spreads for s in sorts]), axis=0)
    labels = [f"Q{k}" for k in range(1, 6)] + ["H-L"]
    out = pd.DataFrame(table, index=labels, columns=labels)
    out.index.name = "first_sort"
    return out


# ---------------------------------------------------------------------------
# time series


@dataclass
class PortfolioSeries:
    """Monthly portfolio returns indexed by formation month.

    ``legs`` holds one weight history per fully invested leg (long first,
    short second for a long-short portfolio); ``asset_returns`` holds each
    month's realised member returns for turnover drift.
    """

    months: np.ndarray
    returns: np.ndarray
    legs: list[list[dict[str, float]]] = field(default_factory=list)
    asset_returns: list[dict[str, float]] = field(default_factory=list)

    @property
    def log_returns(self) -> np.ndarray:
        return np.log1p(self.returns)

    def turnover_series(self) -> np.ndarray:
        """Per-month turnover summed over legs; the first month carries none."""
        out = np.zeros(len(self.months))
        for leg in self.legs:
            out[1:] += turnover_per_date(leg, self.asset_returns)
        return out


def _check_contiguous(months: np.ndarray) -> None:
    if len(months) and np.any(np.diff(months) != 1):
        gaps = [int(m) + 1 for m, d in zip(months[:-1], np.diff(months)) if d != 1]
        raise ValueError(f"portfolio months must be consecutive; missing month after index {gaps[:5]}")


def long_short(decile_returns: pd.DataFrame) -> pd.Series:
    """Top-minus-bottom decile spread; rows are consecutive formation months."""
    months = np.asarray(decile_returns.index)
    _check_contiguous(months)
    return decile_returns.iloc[:, -1] - decile_returns.iloc[:, 0]


@dataclass
class Backtest:
    decile_returns: pd.DataFrame  # month x 10
    long_short: PortfolioSeries
    sorts: dict[int, DecileSort]


def backtest(frame: pd.DataFrame, score: str = "r_hat", size: str = "size", ret: str = "ret_1") -> Backtest:
    """Monthly decile sorts on ``score`` and the top-minus-bottom portfolio.

    ``frame`` holds one row per firm and formation month with the score, the
    size at formation and the realised return over the following month.
    """
    months, rows, legs_long, legs_short, rets, sorts = [], [], [], [], [], {}
    for m, g in frame.groupby("month", sort=True):
        s = decile_sort(g[score].to_numpy(), g[size].to_numpy(), g["firm_id"].to_numpy())
        R = g[ret].to_numpy(dtype=float)
        rows.append(s.group_returns(R))
        months.append(int(m))
        legs_long.append(s.leg(N_DECILES))
        legs_short.append(s.leg(1))
        rets.append(dict(zip(g["firm_id"].tolist(), R.tolist())))
        sorts[int(m)] = s
    dec = pd.DataFrame(rows, index=months, columns=[f"D{k}" for k in range(1, N_DECILES + 1)])
    dec.index.name = "month"
    spread = long_short(dec).to_numpy()
    series = PortfolioSeries(np.array(months), spread, [legs_long, legs_short], rets)
    return Backtest(dec, series, sorts)


def max_drawdown(returns) -> float:
    """Largest fractional fall of cumulative wealth from its running peak."""
    R = np.asarray(returns, dtype=float)
    if R.size == 0:
        raise ValueError("max drawdown of an empty series")
    if np.any(R <= -1.0):
        raise ValueError("returns at or below -100% make wealth non-positive")
    wealth = np.cumprod(1.0 + R)
    peak = np.maximum.accumulate(np.concatenate([[1.0], wealth]))[1:]
    return float(max(0.0, np.max(1.0 - wealth / peak)))


def turnover_per_date(
    weights: Sequence[Mapping[str, float]], returns: Sequence[Mapping[str, float]]
) -> np.ndarray:
    """Drifted-weight turnover at each rebalance after the first formation.

    Entry ``t`` compares the target weights of month ``t + 1`` with month
    ``t``'s weights after drifting with that month's realised returns.
    """
    if len(weights) != len(returns):
        raise ValueError("weights and returns must cover the same months")
    for t, w in enumerate(weights):
        total = math.fsum(w.values())
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights at date {t} sum to {total}, expected 1")
    out = np.empty(max(len(weights) - 1, 0))
    for t in range(len(weights) - 1):
        w, r, w_next = weights[t], returns[t], weights[t + 1]
        missing = [k for k in w if k not in r]
        if missing:
            raise ValueError(f"date {t} lacks returns for held assets {missing[:5]}")
        port = math.fsum(w[k] * r[k] for k in w)
        drifted = {k: w[k] * (1.0 + r[k]) / (1.0 + port) for k in w}
        keys = set(drifted) | set(w_next)
        out[t] = math.fsum(abs(w_next.get(k, 0.0) - drifted.get(k, 0.0)) for k in keys)
    return out


def turnover(weights, returns) -> float:
    """Average one-way turnover over rebalance dates (0 for a single date)."""
    per = turnover_per_date(weights, returns)
    return float(per.mean()) if per.size else 0.0


@dataclass(frozen=True)
class PerfMetrics:
    mean_log: float
    std_log: float
    cum_log: float
    sharpe: float
    max_loss: float
    max_drawdown: float
    turnover: float

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def perf_metrics(returns, turnovers=None) -> PerfMetrics:
    """Log-return moments, annualised Sharpe on arithmetic returns, loss measures.

    ``turnovers`` is the per-month turnover series; its average excludes the
    first month, which has no prior portfolio.
    """
    R = np.asarray(returns, dtype=float)
    if R.size < 2:
        raise ValueError("performance metrics need at least two months (std undefined)")
    if np.any(R <= -1.0):
        raise ValueError("returns at or below -100% have no log return")
    if np.ptp(R) == 0.0:
        raise ValueError("degenerate series: zero return volatility leaves the Sharpe ratio undefined")
    sd = float(np.std(R, ddof=1))
    r = np.log1p(R)
    to = 0.0
    if turnovers is not None:
        to_arr = np.asarray(turnovers, dtype=float)
        to = float(to_arr[1:].mean()) if to_arr.size > 1 else 0.0
    return PerfMetrics(
        mean_log=float(np.mean(r)),
        std_log=float(np.std(r, ddof=1)),
        cum_log=math.fsum(r.tolist()),
        sharpe=float(np.mean(R)) / sd * math.sqrt(12.0),
        max_loss=float(-np.min(R)),
        max_drawdown=max_drawdown(R),
        turnover=to,
    )


def apply_transaction_costs(gross, turnovers, c_bps: float) -> tuple[np.ndarray, PerfMetrics]:
    """Net returns ``gross - c * turnover`` per month and their metrics."""
    gross = np.asarray(gross, dtype=float)
    turnovers = np.asarray(turnovers, dtype=float)
    if gross.shape != turnovers.shape:
        raise ValueError("gross returns and turnovers must align")
    net = gross - (c_bps / 1e4) * turnovers
    return net, perf_metrics(net, turnovers)


def performance_table(series: Mapping[str, PortfolioSeries], costs_bps: Sequence[float] = (0,)) -> pd.DataFrame:
    """One row per (label, cost) with every performance column."""
    rows = []
    for label, s in series.items():
        to = s.turnover_series()
        for c in costs_bps:
            _, m = apply_transaction_costs(s.returns, to, c)
            rows.append({"lambda": label, "cost_bps": c, **m.as_dict()})
    return pd.DataFrame(rows)
