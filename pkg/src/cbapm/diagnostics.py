"""Pricing diagnostics: pooled OLS with Driscoll-Kraay errors, factor-mimicking
spreads, time-series alpha regressions and the GRS test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from . import portfolio as pf

DEFAULT_BANDWIDTH = 11


@dataclass
class PanelRegressionResult:
    names: list[str]  # "const" first
    coef: np.ndarray
    se: np.ndarray
    t_stats: np.ndarray
    r2: float
    adj_r2: float
    nobs: int
    residuals: np.ndarray = field(repr=False)
    t_undefined: bool = False

    @property
    def intercept(self) -> float:
        return float(self.coef[0])

    @property
    def se_intercept(self) -> float:
        return float(self.se[0])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"term": self.names, "coef": self.coef, "se": self.se, "t": self.t_stats, "stars": [stars(t) for t in self.t_stats]}
        )


def _design(X: np.ndarray, names: Sequence[str] | None) -> tuple[np.ndarray, list[str]]:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError("one name per regressor column is required")
    return np.hstack([np.ones((len(X), 1)), X]), ["const", *names]


def collinear_columns(Z: np.ndarray, names: Sequence[str], tol: float = 1e-10) -> list[str]:
    """Columns that add no rank when appended left to right."""
    bad, kept = [], []
    scale = max(np.linalg.norm(Z, axis=0).max(initial=0.0), 1.0)
    for j in range(Z.shape[1]):
        trial = Z[:, [*kept, j]]
        if np.linalg.matrix_rank(trial, tol=tol * scale * math.sqrt(len(Z))) == len(kept) + 1:
            kept.append(j)
        else:
            bad.append(names[j])
    return bad


def pooled_ols(y, X, names: Sequence[str] | None = None) -> PanelRegressionResult:
    """Least squares of ``y`` on an intercept and ``X`` (classical errors).

    Coefficients come from an SVD-based solver rather than an explicit
    inverse; rank deficiency is reported with the offending column names.
    """
    y = np.asarray(y, dtype=float)
    Z, names = _design(X, names)
    if len(y) != len(Z):
        raise ValueError("y and X must have the same number of rows")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(Z))):
        raise ValueError("regression inputs must be finite")
    bad = collinear_columns(Z, names)
    if bad:
        raise ValueError(f"regressors are rank deficient; collinear columns: {bad}")
    n, k = Z.shape
    if n <= k:
        raise ValueError(f"need more observations ({n}) than parameters ({k})")
    coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
    resid = y - Z @ coef
    if np.max(np.abs(resid)) <= 1e-12 * max(np.max(np.abs(y)), 1.0):
        resid = np.zeros_like(resid)  # exact fit up to rounding
    ssr = float(resid @ resid)
    sst = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ssr / sst if sst > 0 else 1.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - k)
    cov = ssr / (n - k) * np.linalg.inv(Z.T @ Z)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    t, undefined = _t_stats(coef, se)
    return PanelRegressionResult(names, coef, se, t, r2, adj, n, resid, undefined)


def _t_stats(coef: np.ndarray, se: np.ndarray) -> tuple[np.ndarray, bool]:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / np.where(se > 0, se, 1.0), np.nan)
    return t, bool(np.any(se == 0))


def driscoll_kraay_cov(
    Z: np.ndarray,
    residuals: np.ndarray,
    time: np.ndarray,
    bandwidth: int = DEFAULT_BANDWIDTH,
    small_sample: bool = True,
) -> np.ndarray:
    """Driscoll-Kraay coefficient covariance for a pooled regression.

    Scores are summed within each period, then combined with Bartlett weights
    ``1 - l/(L+1)`` up to lag ``L``. ``small_sample`` multiplies by
    ``T/(T-k)`` with ``T`` the number of periods and ``k`` the regressor count.
    """
    Z = np.asarray(Z, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    time = np.asarray(time)
    if bandwidth < 0:
        raise ValueError("bandwidth must be non-negative")
    periods, inverse = np.unique(time, return_inverse=True)
    T, k = len(periods), Z.shape[1]
    if T < bandwidth + 1:
        raise ValueError(f"need at least {bandwidth + 1} distinct periods for bandwidth {bandwidth}, got {T}")
    scores = np.zeros((T, k))
    np.add.at(scores, inverse, Z * residuals[:, None])
    S = scores.T @ scores
    for lag in range(1, bandwidth + 1):
        G = scores[lag:].T @ scores[:-lag]
        S += (1.0 - lag / (bandwidth + 1.0)) * (G + G.T)
    bread = np.linalg.inv(Z.T @ Z)
    cov = bread @ S @ bread
    if small_sample:
        if T <= k:
            raise ValueError("small-sample factor needs more periods than regressors")
        cov *= T / (T - k)
    return cov


def driscoll_kraay_se(
    X,
    residuals,
    time,
    bandwidth: int = DEFAULT_BANDWIDTH,
    small_sample: bool = True,
) -> np.ndarray:
    """Standard errors from :func:`driscoll_kraay_cov`; ``X`` includes any intercept column."""
    cov = driscoll_kraay_cov(np.asarray(X, dtype=float), residuals, time, bandwidth, small_sample)
    return np.sqrt(np.maximum(np.diag(cov), 0.0))


def pooled_ols_dk(
    y, X, time, names: Sequence[str] | None = None, bandwidth: int = DEFAULT_BANDWIDTH, small_sample: bool = True
) -> PanelRegressionResult:
    """Pooled OLS with Driscoll-Kraay standard errors and t-statistics."""
    res = pooled_ols(y, X, names)
    Z, _ = _design(X, names)
    se = driscoll_kraay_se(Z, res.residuals, time, bandwidth, small_sample)
    t, undefined = _t_stats(res.coef, se)
    return PanelRegressionResult(res.names, res.coef, se, t, res.r2, res.adj_r2, res.nobs, res.residuals, undefined)


def stars(t: float) -> str:
    """Two-sided normal significance marks at 10/5/1 percent."""
    if not np.isfinite(t):
        return ""
    a = abs(t)
    return "***" if a >= 2.5758293035489 else "**" if a >= 1.959963984540054 else "*" if a >= 1.6448536269514722 else ""


# ---------------------------------------------------------------------------
# factor-mimicking portfolios


@dataclass
class FactorSet:
    returns: pd.DataFrame  # realisation month x factor
    degenerate: dict[str, bool] = field(default_factory=dict)


def factor_mimicking(frame: pd.DataFrame, scores: Sequence[str], size: str = "size", ret: str = "ret_1") -> FactorSet:
    """Top-minus-bottom decile spreads on each score column.

    The spread formed at month ``t`` is realised over the next month and is
    indexed by ``t + 1``. A score constant within any month is flagged.
    """
    cols, flags = {}, {}
    for s in scores:
        bt = pf.backtest(frame, score=s, size=size, ret=ret)
        cols[s] = pd.Series(bt.long_short.returns, index=bt.long_short.months + 1)
        flags[s] = bool((frame.groupby("month")[s].agg(np.ptp) == 0).any())
    out = pd.DataFrame(cols)
    out.index.name = "month"
    return FactorSet(out, flags)


# ---------------------------------------------------------------------------
# time-series regressions and GRS


@dataclass
class TsRegression:
    alphas: np.ndarray
    betas: np.ndarray  # (N, K)
    residuals: np.ndarray  # (T, N)
    r2: np.ndarray
    alpha_t: np.ndarray


def ts_alpha_regression(assets, factors) -> TsRegression:
    """Per-asset OLS of returns on an intercept and the factors."""
    Y = np.asarray(assets, dtype=float)
    F = np.asarray(factors, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if F.ndim == 1:
        F = F[:, None]
    T, N = Y.shape
    K = F.shape[1]
    if len(F) != T:
        raise ValueError("assets and factors must cover the same months")
    if T <= N + K:
        raise ValueError(f"need T > N + K for the GRS test: T={T}, N={N}, K={K}")
    Z = np.hstack([np.ones((T, 1)), F])
    B, *_ = np.linalg.lstsq(Z, Y, rcond=None)
    resid = Y - Z @ B
    sst = ((Y - Y.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(sst > 0, 1.0 - (resid**2).sum(axis=0) / sst, 1.0)
    s2 = (resid**2).sum(axis=0) / (T - K - 1)
    se_a = np.sqrt(s2 * np.linalg.inv(Z.T @ Z)[0, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        t_a = np.where(se_a > 0, B[0] / np.where(se_a > 0, se_a, 1.0), np.nan)
    return TsRegression(B[0], B[1:].T, resid, r2, t_a)


@dataclass(frozen=True)
class GrsResult:
    F_stat: float
    p_value: float
    mean_abs_alpha: float
    rms_alpha: float
    n_assets: int
    n_factors: int
    n_months: int

    @property
    def mean_abs_alpha_annual(self) -> float:
        return 12.0 * self.mean_abs_alpha

    @property
    def rms_alpha_annual(self) -> float:
        return 12.0 * self.rms_alpha

    def as_dict(self) -> dict[str, float]:
        d = dict(self.__dict__)
        d["mean_abs_alpha_annual"] = self.mean_abs_alpha_annual
        d["rms_alpha_annual"] = self.rms_alpha_annual
        return d


def grs_test(alphas, residuals, factors) -> GrsResult:
    """Joint test that all time-series intercepts are zero.

    ``F = (T-N-K)/N * a' S^-1 a / (1 + m' W^-1 m)`` with residual covariance
    ``S`` and factor covariance ``W`` both scaled by ``1/T``; the p-value is
    the upper tail of ``F(N, T-N-K)``.
    """
    a = np.asarray(alphas, dtype=float)
    E = np.asarray(residuals, dtype=float)
    F = np.asarray(factors, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    if E.ndim == 1:
        E = E[:, None]
    T, N = E.shape
    K = F.shape[1]
    if T <= N + K:
        raise ValueError(f"need T > N + K for the GRS test: T={T}, N={N}, K={K}")
    Sigma = E.T @ E / T
    mu = F.mean(axis=0)
    Fc = F - mu
    Omega = Fc.T @ Fc / T
    try:
        Lsig = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        raise ValueError("residual covariance is singular; use fewer test assets or a longer sample") from None
    if np.linalg.cond(Sigma) > 1e14:
        raise ValueError("residual covariance is singular; use fewer test assets or a longer sample")
    u = np.linalg.solve(Lsig, a)
    quad_a = float(u @ u)
    quad_f = float(mu @ np.linalg.solve(Omega, mu))
    stat = (T - N - K) / N * quad_a / (1.0 + quad_f)
    p = float(stats.f.sf(stat, N, T - N - K))
    return GrsResult(
        F_stat=float(stat),
        p_value=p,
        mean_abs_alpha=float(np.mean(np.abs(a))),
        rms_alpha=float(np.sqrt(np.mean(a**2))),
        n_assets=N,
        n_factors=K,
        n_months=T,
    )


def align(assets: pd.DataFrame, factors: pd.DataFrame) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Restrict both frames to their common months."""
    common = assets.index.intersection(factors.index).sort_values()
    if len(common) == 0:
        raise ValueError("test assets and factors share no months")
    return assets.loc[common], factors.loc[common]


def grs_table(assets: pd.DataFrame, models: Mapping[str, pd.DataFrame]) -> pd.DataFrame:
    """One GRS row per factor model, on the months common to assets and factors."""
    rows = []
    for name, factors in models.items():
        Y, F = align(assets, factors)
        reg = ts_alpha_regression(Y.to_numpy(), F.to_numpy())
        res = grs_test(reg.alphas, reg.residuals, F.to_numpy())
        rows.append({"model": name, **res.as_dict()})
    return pd.DataFrame(rows)
