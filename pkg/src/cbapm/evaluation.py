"""Expanding-window splits and out-of-sample metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .panel_data import month_index, month_label

DEFAULT_FIRST_TRAIN_END = month_index("2010-12")
DEFAULT_DATA_END = month_index("2023-12")
HORIZONS = (1, 3, 6, 12)


@dataclass(frozen=True)
class WindowSplit:
    """Inclusive month ranges for one expanding-window step."""

    index: int
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def __post_init__(self) -> None:
        if not (self.train[0] <= self.train[1] < self.val[0] <= self.val[1] < self.test[0] <= self.test[1]):
            raise ValueError(f"window ranges out of order: {self}")
        if self.val[0] != self.train[1] + 1 or self.test[0] != self.val[1] + 1:
            raise ValueError("window ranges must be contiguous")

    @property
    def train_end(self) -> int:
        return self.train[1]

    @property
    def val_end(self) -> int:
        return self.val[1]

    @property
    def test_end(self) -> int:
        return self.test[1]

    def describe(self) -> str:
        lab = lambda r: f"{month_label(r[0])}..{month_label(r[1])}"  # noqa: E731
        return f"window {self.index}: train {lab(self.train)} | val {lab(self.val)} | test {lab(self.test)}"


def make_windows(
    first_train_end: int = DEFAULT_FIRST_TRAIN_END,
    data_end: int = DEFAULT_DATA_END,
    *,
    horizon: int = 12,
    train_start: int = 0,
    val_months: int = 24,
    test_months: int = 12,
    step: int = 12,
    reserve: int = 12,
    max_windows: int | None = None,
) -> list[WindowSplit]:
    """Expanding windows whose test ranges never overlap.

    Window ``k`` trains on ``[train_start, first_train_end + k*step]``, then
    validates on the next ``val_months`` and tests on the following
    ``test_months``. A test range is admitted only if it ends at least
    ``max(reserve, horizon)`` months before ``data_end`` so every test
    forecast has a realised return inside the data.
    """
    if min(val_months, test_months, step) <= 0 or horizon <= 0 or reserve < 0:
        raise ValueError("window lengths, step and horizon must be positive")
    if first_train_end < train_start:
        raise ValueError("first training end precedes the training start")
    last_test_end = data_end - max(reserve, horizon)
    windows: list[WindowSplit] = []
    k = 0
    while max_windows is None or k < max_windows:
        tr_end = first_train_end + k * step
        val = (tr_end + 1, tr_end + val_months)
        test = (val[1] + 1, val[1] + test_months)
        if test[1] > last_test_end:
            break
        windows.append(WindowSplit(k, (train_start, tr_end), val, test))
        k += 1
    if not windows:
        needed = first_train_end + val_months + test_months + max(reserve, horizon)
        raise ValueError(
            f"data ending {month_label(data_end)} is too short for one window: "
            f"need data through {month_label(needed)} ({needed - data_end} more months)"
        )
    for a, b in zip(windows, windows[1:]):
        assert a.test[1] < b.test[0], "test ranges overlap"
    return windows


# ---------------------------------------------------------------------------
# R-squared


def _r2_parts(pred: np.ndarray, realized: np.ndarray) -> tuple[float, float]:
    pred = np.asarray(pred, dtype=float)
    realized = np.asarray(realized, dtype=float)
    if pred.shape != realized.shape:
        raise ValueError(f"prediction shape {pred.shape} != realized shape {realized.shape}")
    # fsum makes the sums independent of observation order
    num = math.fsum(((realized - pred) ** 2).ravel().tolist())
    den = math.fsum((realized**2).ravel().tolist())
    return num, den


def r2_from_sums(num: float, den: float) -> float:
    if den == 0.0:
        raise ValueError("R-squared undefined: realized values are all zero")
    return 100.0 * (1.0 - num / den)


def oos_r2_returns(pred: np.ndarray, realized: np.ndarray) -> float:
    """Out-of-sample R-squared in percent against a zero forecast (no demeaning)."""
    return r2_from_sums(*_r2_parts(pred, realized))


def oos_r2_consensus(pred: np.ndarray, realized: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-variable R-squared (percent) for ``(n, k)`` arrays and their plain average."""
    pred = np.asarray(pred, dtype=float)
    realized = np.asarray(realized, dtype=float)
    if pred.ndim != 2 or pred.shape != realized.shape:
        raise ValueError("consensus arrays must be matching (n, k) matrices")
    per = np.array([oos_r2_returns(pred[:, j], realized[:, j]) for j in range(pred.shape[1])])
    return per, float(np.mean(per))


@dataclass
class R2Accumulator:
    """Running numerator/denominator sums; pooling is additive."""

    num: float = 0.0
    den: float = 0.0
    n: int = 0

    def add(self, pred: np.ndarray, realized: np.ndarray) -> "R2Accumulator":
        num, den = _r2_parts(pred, realized)
        self.num += num
        self.den += den
        self.n += int(np.size(realized))
        return self

    def merge(self, other: "R2Accumulator") -> "R2Accumulator":
        return R2Accumulator(self.num + other.num, self.den + other.den, self.n + other.n)

    @property
    def r2(self) -> float:
        return r2_from_sums(self.num, self.den)


# ---------------------------------------------------------------------------
# report assembly


def _lambda_label(lam: float) -> str:
    return "inf" if np.isinf(lam) else f"{lam:g}"


def r2_table(predictions: pd.DataFrame, n_consensus: int, per_window: bool = True) -> pd.DataFrame:
    """Long table ``lambda,h,var_or_return,r2_pct,window``.

    ``predictions`` needs columns ``lambda, h, window, r, r_hat`` plus
    ``c_1..c_k`` and ``c_hat_1..c_hat_k``. Pooled rows carry ``window = all``.
    """
    rows = []
    c_cols = [f"c_{j + 1}" for j in range(n_consensus)]
    ch_cols = [f"c_hat_{j + 1}" for j in range(n_consensus)]
    for (lam, h), grp in predictions.groupby(["lambda", "h"], sort=True):
        groups: list[tuple[str, pd.DataFrame]] = [("all", grp)]
        if per_window:
            groups += [(str(w), g) for w, g in grp.groupby("window", sort=True)]
        for wlabel, g in groups:
            rows.append((lam, h, "return", oos_r2_returns(g["r_hat"], g["r"]), wlabel))
            per, avg = oos_r2_consensus(g[ch_cols].to_numpy(), g[c_cols].to_numpy())
            for j, v in enumerate(per):
                rows.append((lam, h, f"consensus_{j + 1}", v, wlabel))
            rows.append((lam, h, "consensus_average", avg, wlabel))
    out = pd.DataFrame(rows, columns=["lambda", "h", "var_or_return", "r2_pct", "window"])
    out["lambda"] = out["lambda"].map(_lambda_label)
    return out


def record_insample_mse(histories: Iterable[tuple[float, Sequence]]) -> pd.DataFrame:
    """Trace table ``lambda,epoch,L_R,mean_L_C`` from ``(lambda, records)`` pairs.

    ``records`` are per-epoch objects with ``epoch``, ``train_L_R`` and
    ``train_mean_L_C`` attributes (one per completed epoch).
    """
    rows = [
        (_lambda_label(lam), r.epoch, r.train_L_R, r.train_mean_L_C)
        for lam, records in histories
        for r in records
    ]
    return pd.DataFrame(rows, columns=["lambda", "epoch", "L_R", "mean_L_C"])
