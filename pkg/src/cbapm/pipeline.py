"""Per-window preprocessing, macro compression, training and prediction.

Every fit inside a window (variable selection, imputation, rank
normalisation, macro min-max bounds, compressor, network weights) only sees
months up to the window's validation end; the macro scaler and compressor
only see the training range. Test inputs are rebuilt from months up to the
test end with the characteristic set frozen from the fit.
"""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from . import macro_encoder as me
from . import model as cm
from .evaluation import WindowSplit, make_windows
from .panel_data import (
    FREQUENCY_LAG,
    MacroMatrix,
    Panel,
    VariableMeta,
    describe_variables,
    lag_characteristics,
    minmax_normalize_macro,
    preprocess_panel,
)

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass
class PipelineConfig:
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    horizons: tuple[int, ...] = (1, 3, 6, 12)
    compressor: me.CompressorChoice = field(default_factory=me.CompressorChoice)
    autoencoder: me.AutoencoderConfig = field(default_factory=me.AutoencoderConfig)
    model: cm.ModelConfig = field(default_factory=cm.ModelConfig)
    base_seed: int = 0
    first_train_end: int = 203
    data_end: int | None = None
    sample_start: int | None = None
    max_missing: float = 0.20
    latest_start: int | None = None
    val_months: int = 24
    test_months: int = 12
    reserve: int = 12
    max_windows: int | None = None
    record_insample: bool = False

    def __post_init__(self) -> None:
        self.lambdas = tuple(cm.check_lambda(float(x)) for x in self.lambdas)
        self.horizons = tuple(int(h) for h in self.horizons)
        if not self.lambdas or not self.horizons:
            raise ValueError("need at least one lambda and one horizon")


@dataclass
class LaggedData:
    """Lagged panel restricted to the usable sample plus metadata."""

    panel: Panel
    meta: list[VariableMeta]
    start: int
    end: int


def prepare(panel: Panel, meta: Sequence[VariableMeta], sample_start: int | None = None) -> LaggedData:
    """Apply publication lags and drop months before the usable sample.

    The default sample start is the first recorded month plus the longest
    lag, the first month at which every variable can be populated.
    """
    meta = describe_variables(panel, meta)
    lagged = lag_characteristics(panel, meta)
    if sample_start is None:
        max_lag = max(FREQUENCY_LAG[m.frequency] for m in meta)
        sample_start = int(panel.months.min()) + max_lag
    end = int(panel.months.max())
    return LaggedData(lagged.slice_months(sample_start, None), list(meta), sample_start, end)


@dataclass
class WindowData:
    """Model-ready matrices for one window (all horizons share the features)."""

    window: WindowSplit
    characteristics: list[str]
    features: list[str]
    fit: pd.DataFrame  # months <= val_end
    test: pd.DataFrame  # test months
    compressor: me.FittedCompressor | None = None


@dataclass
class PreparedWindow:
    """Preprocessed firm rows of one window before the macro block is attached.

    ``fit`` covers months up to the validation end and ``test`` the test
    months; both carry rank-normalised characteristics ``c_1..c_k`` consensus
    targets, ``size`` and ``ret_<h>`` columns.
    """

    window: WindowSplit
    characteristics: list[str]
    fit: pd.DataFrame
    test: pd.DataFrame


def _firm_frame(p: Panel, raw: Panel) -> pd.DataFrame:
    df = p.data[["firm_id", "month", *p.characteristics]].copy()
    for j, c in enumerate(p.consensus):
        df[f"c_{j + 1}"] = p.data[c].to_numpy()
    extra = raw.data[["firm_id", "month", raw.size, *raw.returns.values()]]
    extra = extra.rename(columns={raw.size: "size", **{c: f"ret_{h}" for h, c in raw.returns.items()}})
    return df.merge(extra, on=["firm_id", "month"], how="left", validate="one_to_one")


def preprocess_window(data: LaggedData, window: WindowSplit, config: PipelineConfig) -> PreparedWindow:
    """Fit variable selection and imputation on months up to the validation end."""
    start = data.start
    latest = config.latest_start if config.latest_start is not None else window.train_end
    fit_panel, _ = preprocess_panel(
        data.panel.slice_months(start, window.val_end), data.meta, max_missing=config.max_missing, latest_start=latest
    )
    chars = list(fit_panel.characteristics)
    if not chars:
        raise ValueError(f"window {window.index}: no characteristic survives variable selection")
    test_panel, _ = preprocess_panel(
        data.panel.slice_months(start, window.test_end), data.meta, keep_characteristics=chars
    )
    test_panel = test_panel.slice_months(window.test[0], window.test_end)
    return PreparedWindow(window, chars, _firm_frame(fit_panel, data.panel), _firm_frame(test_panel, data.panel))


def compress_window(
    macro: MacroMatrix, window: WindowSplit, start: int, config: PipelineConfig
) -> tuple[me.FittedCompressor, MacroMatrix]:
    """Min-max scale and fit the compressor on the training range; encode through the test end."""
    macro_w = macro.slice_months(start, window.test_end)
    scaled = minmax_normalize_macro(macro_w, (start, window.train_end))
    comp = me.fit_compressor(config.compressor, scaled, (start, window.train_end), config.autoencoder, seed=config.base_seed)
    z = comp.transform(scaled.values)
    return comp, MacroMatrix(scaled.months.copy(), z, [f"z{j + 1}" for j in range(z.shape[1])])


def assemble_window(prep: PreparedWindow, latent: MacroMatrix, compressor: me.FittedCompressor | None = None) -> WindowData:
    def attach(df: pd.DataFrame) -> pd.DataFrame:
        z = pd.DataFrame(latent.rows(df["month"].to_numpy()), columns=latent.names, index=df.index)
        return pd.concat([df, z], axis=1)

    features = [*prep.characteristics, *latent.names]
    return WindowData(prep.window, prep.characteristics, features, attach(prep.fit), attach(prep.test), compressor)


def build_window(
    data: LaggedData,
    macro: MacroMatrix,
    window: WindowSplit,
    config: PipelineConfig,
) -> WindowData:
    prep = preprocess_window(data, window, config)
    comp, latent = compress_window(macro, window, data.start, config)
    return assemble_window(prep, latent, comp)


def train_data(wd: WindowData, horizon: int) -> cm.TrainData:
    """Train/validation split for one horizon; rows need a realised target."""
    cnames = consensus_columns(wd.fit)
    target = f"ret_{horizon}"
    ok = np.isfinite(wd.fit[target].to_numpy())
    tr = wd.fit[ok & (wd.fit["month"] <= wd.window.train_end).to_numpy()]
    va = wd.fit[ok & (wd.fit["month"] > wd.window.train_end).to_numpy()]

    def arrays(df: pd.DataFrame):
        return df[wd.features].to_numpy(), df[cnames].to_numpy(), df[target].to_numpy()

    return cm.TrainData(*arrays(tr), *arrays(va))


@dataclass
class FitOutcome:
    lam: float
    horizon: int
    window: int
    ensemble: cm.Ensemble
    results: list[cm.TrainResult]
    predictions: pd.DataFrame


def consensus_columns(df: pd.DataFrame) -> list[str]:
    cols = [c for c in df.columns if re.fullmatch(r"c_\d+", c)]
    return sorted(cols, key=lambda c: int(c[2:]))


def predict_window(wd: WindowData, ensemble: cm.Ensemble) -> pd.DataFrame:
    """Ensemble forecasts for every test firm-month with a realised target."""
    horizon, lam = ensemble.horizon, ensemble.lam
    target = f"ret_{horizon}"
    test = wd.test[np.isfinite(wd.test[target].to_numpy())]
    c_hat, r_hat = cm.ensemble_predict(ensemble, test[wd.features].to_numpy())
    pred = pd.DataFrame(
        {
            "firm_id": test["firm_id"].to_numpy(),
            "month": test["month"].to_numpy(),
            "window": wd.window.index,
            "lambda": lam,
            "h": horizon,
            "r_hat": r_hat,
        }
    )
    for j in range(c_hat.shape[1]):
        pred[f"c_hat_{j + 1}"] = c_hat[:, j]
    pred["r"] = test[target].to_numpy()
    for c in consensus_columns(test):
        pred[c] = test[c].to_numpy()
    pred["size"] = test["size"].to_numpy()
    pred["ret_1"] = test["ret_1"].to_numpy() if "ret_1" in test else np.nan
    return pred


def fit_window(wd: WindowData, lam: float, horizon: int, config: PipelineConfig) -> tuple[cm.Ensemble, list[cm.TrainResult]]:
    return cm.train_ensemble(
        train_data(wd, horizon), lam, horizon, config.model, config.base_seed, record_insample=config.record_insample
    )


def fit_and_predict(wd: WindowData, lam: float, horizon: int, config: PipelineConfig) -> FitOutcome:
    ens, results = fit_window(wd, lam, horizon, config)
    pred = predict_window(wd, ens)
    logger.info("window %d lambda=%s h=%d: %d test rows", wd.window.index, lam, horizon, len(pred))
    return FitOutcome(lam, horizon, wd.window.index, ens, results, pred)


def windows_for(data: LaggedData, config: PipelineConfig) -> list[WindowSplit]:
    data_end = config.data_end if config.data_end is not None else data.end
    return make_windows(
        config.first_train_end,
        data_end,
        horizon=max(config.horizons),
        train_start=data.start,
        val_months=config.val_months,
        test_months=config.test_months,
        reserve=config.reserve,
        max_windows=config.max_windows,
    )


def _task(args: tuple[WindowData, float, int, PipelineConfig]) -> FitOutcome:
    return fit_and_predict(*args)


@dataclass
class PipelineResult:
    windows: list[WindowData]
    outcomes: list[FitOutcome]

    @property
    def predictions(self) -> pd.DataFrame:
        frames = [o.predictions for o in self.outcomes]
        out = pd.concat(frames, ignore_index=True)
        return out.sort_values(["lambda", "h", "window", "month", "firm_id"], kind="stable").reset_index(drop=True)


def run(
    panel: Panel,
    meta: Sequence[VariableMeta],
    macro: MacroMatrix,
    config: PipelineConfig,
    *,
    jobs: int = 1,
) -> PipelineResult:
    """Build every window, then train and predict each (window, lambda, h)."""
    data = prepare(panel, meta, config.sample_start)
    windows = [build_window(data, macro, w, config) for w in windows_for(data, config)]
    tasks = [(wd, lam, h, config) for wd in windows for lam in config.lambdas for h in config.horizons]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_task, tasks))
    else:
        outcomes = [_task(t) for t in tasks]
    return PipelineResult(windows, outcomes)


def lambda_label(lam: float) -> str:
    return "inf" if math.isinf(lam) else f"{lam:g}"


def desk_config(**overrides) -> PipelineConfig:
    """Settings sized for the default synthetic panel on a single CPU.

    Two expanding windows (tests in 2011 and 2012 on a panel starting
    1994-01), a small autoencoder, larger batches and a 25-epoch cap with a
    single ensemble member.
    """
    base = dict(
        first_train_end=179,
        compressor=me.CompressorChoice("autoencoder", 8),
        autoencoder=me.AutoencoderConfig(
            hidden=(32, 16), latent_dim=8, batch_size=16, lr=1e-3, early_stop_patience=50, max_epochs=400, dropout=0.0
        ),
        model=cm.ModelConfig(batch_size=1024, lr=4e-3, dropout=0.1, max_epochs=25, ensemble_size=1),
    )
    return PipelineConfig(**{**base, **overrides})
