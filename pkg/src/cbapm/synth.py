"""Synthetic firm-month panels with a planted consensus bottleneck.

The data-generating process is written in *usable* time: the month ``t`` at
which a value may enter a forecast after its publication lag.

* a low-rank macro state ``s_t`` follows a stationary AR(1); the observed
  macro vector is ``A s_t + noise``;
* firm characteristics are i.i.d. uniform and rank-normalised per month;
* consensus targets are a random two-layer GELU network of
  ``(characteristics, s_t)`` plus noise, rank-normalised per month;
* the ``h``-month return recorded at ``t`` is ``(h/12) b'C_t`` plus noise
  scaled by ``sqrt(h/12)``.

The CSV files record each characteristic and consensus value at its original
date, i.e. ``lag`` months before it becomes usable, so lagging the panel
restores the planted alignment exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from . import tensor_core as tc
from .panel_data import FREQUENCY_LAG, MacroMatrix, Panel, Schema, VariableMeta, month_label


@dataclass
class SynthConfig:
    n_firms: int = 200
    n_months: int = 240
    n_characteristics: int = 30
    macro_dim: int = 40
    latent_rank: int = 4
    n_consensus: int = 9
    hidden: int = 64
    sigma_c: float = 0.3
    sigma_r: float = 0.25
    sigma_macro: float = 0.1
    ar_coef: float = 0.9
    signal_scale: float = 0.10
    horizons: tuple[int, ...] = (1, 3, 6, 12)
    quarterly_share: float = 0.2
    annual_share: float = 0.1
    growth_share: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        self.horizons = tuple(int(h) for h in self.horizons)
        dims = (self.n_firms, self.n_months, self.n_characteristics, self.macro_dim, self.latent_rank, self.n_consensus, self.hidden)
        if min(dims) <= 0:
            raise ValueError("synthetic dimensions must be positive")
        if min(self.sigma_c, self.sigma_r, self.sigma_macro) < 0:
            raise ValueError("noise scales must be non-negative")
        if not 0 <= self.ar_coef < 1:
            raise ValueError("AR coefficient must lie in [0, 1)")


@dataclass
class SynthTruth:
    """Ground truth in usable time (month ``t`` = when the value is known)."""

    frame: pd.DataFrame  # firm_id, month, x..., c_1..c_k (normalised), signal
    latent: np.ndarray  # (n_months, rank)
    loadings: np.ndarray  # (macro_dim, rank)
    f_star: tc.Params
    b_star: np.ndarray
    characteristics: list[str]
    consensus: list[str]
    meta: list[VariableMeta] = field(default_factory=list)


def _rank_by_month(values: np.ndarray, months: np.ndarray) -> np.ndarray:
    """Column-wise cross-sectional rank map onto [-1, 1] (average ties)."""
    df = pd.DataFrame(values)
    grp = df.groupby(months, sort=False)
    r = grp.rank(method="average").to_numpy()
    n = grp.transform("count").to_numpy(dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 1, 2.0 * (r - 1.0) / (n - 1.0) - 1.0, 0.0)


def _variable_meta(cfg: SynthConfig, rng: np.random.Generator) -> list[VariableMeta]:
    F = cfg.n_characteristics
    n_q = int(round(cfg.quarterly_share * F))
    n_a = int(round(cfg.annual_share * F))
    freqs = ["quarterly"] * n_q + ["annual"] * n_a + ["monthly"] * (F - n_q - n_a)
    freqs = list(rng.permutation(freqs))
    growth = np.zeros(F, dtype=bool)
    growth[rng.choice(F, size=int(round(cfg.growth_share * F)), replace=False)] = True
    meta = [VariableMeta(f"x{j + 1:02d}", frequency=str(freqs[j]), is_growth_rate=bool(growth[j])) for j in range(F)]
    meta += [VariableMeta(f"cons{j + 1}", frequency="annual", role="consensus") for j in range(cfg.n_consensus)]
    return meta


def f_star_forward(params: tc.Params, inputs: np.ndarray) -> np.ndarray:
    h = tc.gelu(inputs @ params["W1"].T + params["b1"])
    return h @ params["W2"].T + params["b2"]


def generate(config: SynthConfig | None = None) -> tuple[Panel, MacroMatrix, SynthTruth]:
    """Return the recorded-time panel, the macro series and the ground truth."""
    cfg = config or SynthConfig()
    rng = tc.make_rng(cfg.seed, 0xC0FFEE)
    N, T, F, D, r, K = cfg.n_firms, cfg.n_months, cfg.n_characteristics, cfg.macro_dim, cfg.latent_rank, cfg.n_consensus
    meta = _variable_meta(cfg, rng)

    # macro state
    s = np.empty((T, r))
    s[0] = rng.standard_normal(r)
    innov = math.sqrt(1.0 - cfg.ar_coef**2)
    for t in range(1, T):
        s[t] = cfg.ar_coef * s[t - 1] + innov * rng.standard_normal(r)
    A = rng.standard_normal((D, r)) / math.sqrt(r)
    macro_vals = s @ A.T + cfg.sigma_macro * rng.standard_normal((T, D))

    # firm-month grid in usable time
    firm_ids = np.array([f"F{i:04d}" for i in range(N)])
    months = np.tile(np.arange(T), N)
    firms = np.repeat(firm_ids, T)
    X_raw = rng.uniform(-1.0, 1.0, (N * T, F))
    X = _rank_by_month(X_raw, months)

    # consensus map
    fan_in = F + r
    f_params = {
        "W1": rng.standard_normal((cfg.hidden, fan_in)) * math.sqrt(2.0 / fan_in) * 1.5,
        "b1": 0.5 * rng.standard_normal(cfg.hidden),
        "W2": rng.standard_normal((K, cfg.hidden)) / math.sqrt(cfg.hidden),
        "b2": np.zeros(K),
    }
    inputs = np.hstack([X, s[months]])
    C_clean = f_star_forward(f_params, inputs)
    C_clean = (C_clean - C_clean.mean(axis=0)) / C_clean.std(axis=0)
    C_raw = C_clean + cfg.sigma_c * rng.standard_normal(C_clean.shape)
    C = _rank_by_month(C_raw, months)

    b = rng.standard_normal(K)
    signal = C @ b
    b_star = b * cfg.signal_scale / signal.std()
    signal = C @ b_star

    # sizes: persistent firm level plus small monthly noise
    log_size = 6.0 + 1.5 * np.repeat(rng.standard_normal(N), T) + 0.05 * rng.standard_normal(N * T)
    size = np.exp(log_size)

    returns: dict[int, np.ndarray] = {}
    for h in cfg.horizons:
        scale = h / 12.0
        R = scale * signal + math.sqrt(scale) * cfg.sigma_r * rng.standard_normal(N * T)
        R = np.maximum(R, -0.95)
        R[months + h > T - 1] = np.nan
        returns[h] = R

    char_names = [m.name for m in meta if m.role == "characteristic"]
    cons_names = [m.name for m in meta if m.role == "consensus"]
    truth_frame = pd.DataFrame({"firm_id": firms, "month": months})
    for j, name in enumerate(char_names):
        truth_frame[name] = X_raw[:, j]
    for j in range(K):
        truth_frame[f"c_{j + 1}"] = C[:, j]
    truth_frame["signal"] = signal

    # recorded-time panel: value usable at t is recorded at t - lag
    max_lag = max(FREQUENCY_LAG[m.frequency] for m in meta)
    rec_months = np.arange(-max_lag, T)
    grid = pd.DataFrame({"firm_id": np.repeat(firm_ids, len(rec_months)), "month": np.tile(rec_months, N)})
    data = {"firm_id": grid["firm_id"].to_numpy(), "month": grid["month"].to_numpy()}
    pos = {m: i for i, m in enumerate(rec_months)}
    usable_index = np.arange(N * T).reshape(N, T)

    def recorded(values: np.ndarray, lag: int) -> np.ndarray:
        out = np.full((N, len(rec_months)), np.nan)
        # recorded month m carries usable month m + lag
        src = rec_months + lag
        ok = (src >= 0) & (src < T)
        out[:, ok] = values[usable_index[:, src[ok]]]
        return out.ravel()

    for j, m in enumerate(meta[:F]):
        data[m.name] = recorded(X_raw[:, j], m.lag)
    for j, m in enumerate(meta[F:]):
        data[m.name] = recorded(C_raw[:, j], m.lag)
    data["mcap"] = recorded(size, 0)
    ret_cols = {}
    for h in cfg.horizons:
        ret_cols[h] = f"ret_{h}"
        data[ret_cols[h]] = recorded(returns[h], 0)
    panel = Panel(pd.DataFrame(data), char_names, cons_names, "mcap", ret_cols)
    macro = MacroMatrix(np.arange(T), macro_vals, [f"m{j + 1:02d}" for j in range(D)])
    truth = SynthTruth(truth_frame, s, A, f_params, b_star, char_names, cons_names, meta)
    return panel, macro, truth


def synth_schema(truth: SynthTruth, panel: Panel) -> Schema:
    return Schema("firm_id", "date", list(truth.meta), panel.size, dict(panel.returns))


def inject_missingness(
    panel: Panel,
    rates: float | Mapping[str, float],
    pattern: str = "mcar",
    rng: np.random.Generator | None = None,
) -> Panel:
    """Blank out characteristic/consensus cells; the input panel is untouched.

    ``mcar`` removes each cell independently with the variable's rate;
    ``block`` removes, per firm and variable, one contiguous run of months
    whose length is the rate times the firm's row count.
    """
    rng = rng if rng is not None else tc.make_rng(0)
    cols = [*panel.characteristics, *panel.consensus]
    if isinstance(rates, Mapping):
        unknown = set(rates) - set(cols)
        if unknown:
            raise ValueError(f"unknown variables {sorted(unknown)}")
        per = {c: float(rates.get(c, 0.0)) for c in cols}
    else:
        per = {c: float(rates) for c in cols}
    for c, p in per.items():
        if not 0.0 <= p < 1.0:
            raise ValueError(f"missing rate for {c} must lie in [0, 1)")
    if pattern not in ("mcar", "block"):
        raise ValueError(f"unknown missingness pattern {pattern!r}")

    df = panel.data.copy()
    n = len(df)
    if pattern == "mcar":
        for c in cols:
            if per[c] > 0:
                drop = rng.random(n) < per[c]
                df.loc[drop, c] = np.nan
        return panel.with_data(df)

    starts = df.groupby("firm_id", sort=False).indices
    for c in cols:
        p = per[c]
        if p == 0:
            continue
        col = df[c].to_numpy(copy=True)
        for idx in starts.values():
            length = int(round(p * len(idx)))
            if length == 0:
                continue
            first = int(rng.integers(0, len(idx) - length + 1))
            col[idx[first : first + length]] = np.nan
        df[c] = col
    return panel.with_data(df)


def write_synthetic(out_dir: str | Path, config: SynthConfig | None = None) -> dict[str, Path]:
    """Write panel, macro, schema, factor and test-asset CSVs for the CLI."""
    import json

    from .panel_data import write_macro_csv, write_panel_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panel, macro, truth = generate(config)
    paths = {
        "panel": out / "panel.csv",
        "macro": out / "macro.csv",
        "schema": out / "schema.json",
        "factors": out / "factors.csv",
        "test_assets": out / "test_assets.csv",
        "truth": out / "truth.csv",
    }
    write_panel_csv(panel, paths["panel"])
    write_macro_csv(macro, paths["macro"])
    tc.atomic_write_text(paths["schema"], json.dumps(synth_schema(truth, panel).to_json(), indent=2) + "\n")
    factors, assets = benchmark_portfolios(truth, panel)
    _write_series(factors, paths["factors"])
    _write_series(assets, paths["test_assets"])
    frame = truth.frame.copy()
    frame.insert(1, "date", [month_label(m) for m in frame.pop("month")])
    tc.atomic_write_text(paths["truth"], frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))
    return paths


def _write_series(df: pd.DataFrame, path: Path) -> None:
    out = df.copy()
    out.insert(0, "date", [month_label(m) for m in out.index])
    tc.atomic_write_text(path, out.to_csv(index=False, float_format="%.17g", lineterminator="\n"))


def benchmark_portfolios(truth: SynthTruth, panel: Panel, n_assets: int = 10) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Benchmark factors and characteristic-sorted test assets.

    Returns monthly series indexed by realisation month ``t + 1``: factors
    ``MKT`` (value-weighted market), ``SMB`` (small-minus-big halves) and
    ``XS`` (top-minus-bottom tercile on the first characteristic); test assets
    are value-weighted portfolios sorted on the second characteristic.
    """
    df = panel.data.loc[panel.data["month"] >= 0, ["firm_id", "month", panel.size, panel.returns[1]]]
    df = df.merge(truth.frame[["firm_id", "month", *truth.characteristics[:2]]], on=["firm_id", "month"])
    df = df.dropna()
    size_col, ret_col = panel.size, panel.returns[1]
    x1, x2 = truth.characteristics[:2]
    fac_rows, asset_rows, months = [], [], []
    for m, g in df.groupby("month", sort=True):
        w = g[size_col].to_numpy()
        R = g[ret_col].to_numpy()

        def vw(mask: np.ndarray) -> float:
            return float(np.sum(w[mask] * R[mask]) / np.sum(w[mask]))

        small = w <= np.median(w)
        x = g[x1].to_numpy()
        lo, hi = np.quantile(x, [1 / 3, 2 / 3])
        fac_rows.append([vw(np.ones(len(w), bool)), vw(small) - vw(~small), vw(x >= hi) - vw(x <= lo)])
        order = np.argsort(g[x2].to_numpy(), kind="stable")
        bucket = np.empty(len(order), dtype=int)
        bucket[order] = np.arange(len(order)) * n_assets // len(order)
        asset_rows.append([vw(bucket == k) for k in range(n_assets)])
        months.append(int(m) + 1)
    factors = pd.DataFrame(fac_rows, columns=["MKT", "SMB", "XS"], index=months)
    assets = pd.DataFrame(asset_rows, columns=[f"asset_{k + 1}" for k in range(n_assets)], index=months)
    return factors, assets
