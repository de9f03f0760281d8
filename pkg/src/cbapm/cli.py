"""Command-line entry point: config-driven stages with reproducible output folders.

Every stage writes into ``<root>/<config-hash>/<stage>/`` together with a
``manifest.json`` holding the resolved config, its hash, the seed, the package
version and SHA-256 checksums of inputs and outputs. The root is ``--out``,
else ``$CBAPM_OUT``, else the config's ``out`` entry.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd

from . import __version__
from . import diagnostics as dg
from . import evaluation as ev
from . import macro_encoder as me
from . import model as cm
from . import pipeline as pl
from . import portfolio as pf
from . import synth
from . import tensor_core as tc
from .panel_data import MacroMatrix, load_macro, load_panel, load_schema, month_index, month_label

logger = logging.getLogger("cbapm")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3
STAGES = ("synth", "preprocess", "train-macro", "train", "evaluate", "portfolio", "diagnostics")
PROFILES = ("desk", "full")
SYNTH_FILES = ("panel", "macro", "schema", "factors", "test_assets")


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


class MissingUpstream(RuntimeError):
    def __init__(self, stage: str, path: Path):
        self.stage = stage
        super().__init__(f"missing upstream stage '{stage}': {path} not found; run `cbapm {stage}` first")


@dataclasses.dataclass
class ExperimentConfig:
    """Experiment settings; ``None`` entries fall back to the profile defaults.

    ``profile`` picks the hyper-parameter set: ``desk`` is sized for the
    synthetic panel on one CPU, ``full`` uses the full-scale settings.
    Missing data paths resolve to the ``synth`` stage outputs.
    """

    panel: str | None = None
    macro: str | None = None
    schema: str | None = None
    factors: str | None = None
    test_assets: str | None = None
    out: str = "out"
    profile: str = "desk"
    lambdas: list[float | str] = dataclasses.field(default_factory=lambda: list(pl.DEFAULT_LAMBDAS))
    horizons: list[int] = dataclasses.field(default_factory=lambda: [1, 3, 6, 12])
    compressor: str = "autoencoder"
    latent_dim: int | None = None
    ensemble_size: int | None = None
    max_epochs: int | None = None
    seed: int = 0
    first_train_end: str | None = None
    data_end: str | None = None
    sample_start: str | None = None
    max_windows: int | None = None
    record_insample: bool = True
    costs_bps: list[float] = dataclasses.field(default_factory=lambda: [0, 25, 50, 75])
    double_sort: str = "conditional"
    turnover_legs: str = "sum"
    diagnostics_lambda: float | None = None
    bandwidth: int = dg.DEFAULT_BANDWIDTH
    factor_models: dict[str, list[str]] | None = None
    synth: dict[str, Any] = dataclasses.field(default_factory=dict)

    # ---- validation -----------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        problems: list[str] = []
        if self.profile not in PROFILES:
            problems.append(f"profile must be one of {PROFILES}, got {self.profile!r}")
        lams = []
        for x in self.lambdas:
            try:
                lams.append(cm.check_lambda(parse_lambda(x)))
            except (TypeError, ValueError):
                problems.append(f"lambda {x!r} must be a non-negative number or 'inf'")
        if not self.lambdas:
            problems.append("lambdas must not be empty")
        if len(set(lams)) != len(lams):
            problems.append("lambdas must be distinct")
        bad_h = [h for h in self.horizons if h not in ev.HORIZONS]
        if bad_h or not self.horizons:
            problems.append(f"horizons must be a non-empty subset of {ev.HORIZONS}, got {self.horizons}")
        if self.compressor not in me.COMPRESSOR_KINDS:
            problems.append(f"compressor must be one of {me.COMPRESSOR_KINDS}, got {self.compressor!r}")
        for name in ("latent_dim", "ensemble_size", "max_epochs", "max_windows"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or v <= 0):
                problems.append(f"{name} must be a positive integer, got {v!r}")
        for name in ("first_train_end", "data_end", "sample_start"):
            v = getattr(self, name)
            if v is not None:
                try:
                    month_index(v)
                except ValueError:
                    problems.append(f"{name} must be a YYYY-MM label, got {v!r}")
        if any((not isinstance(c, (int, float))) or c < 0 for c in self.costs_bps):
            problems.append(f"transaction costs must be non-negative numbers, got {self.costs_bps}")
        if self.double_sort not in ("conditional", "independent"):
            problems.append(f"double_sort must be 'conditional' or 'independent', got {self.double_sort!r}")
        if self.turnover_legs not in ("sum", "mean"):
            problems.append(f"turnover_legs must be 'sum' or 'mean', got {self.turnover_legs!r}")
        if not isinstance(self.bandwidth, int) or self.bandwidth < 0:
            problems.append(f"bandwidth must be a non-negative integer, got {self.bandwidth!r}")
        if not isinstance(self.seed, int):
            problems.append(f"seed must be an integer, got {self.seed!r}")
        try:
            synth.SynthConfig(**{"seed": self.seed, **self.synth})
        except (TypeError, ValueError) as exc:
            problems.append(f"synth settings: {exc}")
        if problems:
            raise ConfigError(problems)
        return self

    # ---- derived values ---------------------------------------------------

    def lambda_values(self) -> list[float]:
        return [parse_lambda(x) for x in self.lambdas]

    def canonical(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d.pop("out")
        d["lambdas"] = [pl.lambda_label(x) for x in self.lambda_values()]
        return d

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def synth_config(self) -> synth.SynthConfig:
        return synth.SynthConfig(**{"seed": self.seed, **self.synth})

    def pipeline_config(self) -> pl.PipelineConfig:
        over: dict[str, Any] = dict(
            lambdas=tuple(self.lambda_values()),
            horizons=tuple(self.horizons),
            base_seed=self.seed,
            record_insample=self.record_insample,
            max_windows=self.max_windows,
        )
        for name in ("first_train_end", "data_end", "sample_start"):
            v = getattr(self, name)
            if v is not None:
                over[name] = month_index(v)
        base = pl.desk_config(**over) if self.profile == "desk" else pl.PipelineConfig(**over)
        d = self.latent_dim if self.latent_dim is not None else base.compressor.d
        base.compressor = me.CompressorChoice(self.compressor, d)
        model_over = {}
        if self.ensemble_size is not None:
            model_over["ensemble_size"] = self.ensemble_size
        if self.max_epochs is not None:
            model_over["max_epochs"] = self.max_epochs
        if model_over:
            base.model = cm.ModelConfig(**{**base.model.__dict__, **model_over})
        return base


def parse_lambda(x: float | str) -> float:
    if isinstance(x, str) and x.strip().lower() in ("inf", "infinity", "∞"):
        return math.inf
    if isinstance(x, bool):
        raise TypeError("boolean is not a lambda")
    return float(x)


def load_config(path: str | Path | None, overrides: dict[str, Any]) -> ExperimentConfig:
    doc: dict[str, Any] = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError([f"config file {path} does not exist"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from None
        if not isinstance(doc, dict):
            raise ConfigError(["config file must hold a JSON object"])
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(doc) - known)
    problems = [f"unknown config key {k!r}" for k in unknown]
    merged = {k: v for k, v in doc.items() if k in known}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError([*problems, str(exc)]) from None
    try:
        cfg.validate()
    except ConfigError as exc:
        problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return cfg


# ---------------------------------------------------------------------------
# file helpers


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(df: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tc.atomic_write_text(path, df.to_csv(index=False, float_format="%.17g", lineterminator="\n"))
    return path


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip", dtype={"firm_id": str})


def with_dates(df: pd.DataFrame) -> pd.DataFrame:
    out = df.copy()
    out.insert(list(out.columns).index("month"), "date", [month_label(m) for m in out["month"]])
    return out.drop(columns="month")


def from_dates(df: pd.DataFrame) -> pd.DataFrame:
    out = df.copy()
    out.insert(list(out.columns).index("date"), "month", [month_index(d) for d in out["date"]])
    return out.drop(columns="date")


class Experiment:
    """Resolved directories and shared loaders for one config."""

    def __init__(self, cfg: ExperimentConfig, root: str | Path | None = None, jobs: int = 1):
        self.cfg = cfg
        self.jobs = jobs
        root = root or os.environ.get("CBAPM_OUT") or cfg.out
        self.dir = Path(root) / cfg.hash()

    def stage_dir(self, stage: str) -> Path:
        return self.dir / stage

    def require(self, stage: str, *names: str) -> Path:
        d = self.stage_dir(stage)
        for n in names or ("manifest.json",):
            if not (d / n).exists():
                raise MissingUpstream(stage, d / n)
        return d

    def input_path(self, name: str) -> Path | None:
        given = getattr(self.cfg, name)
        if given is not None:
            p = Path(given)
            if not p.exists():
                raise FileNotFoundError(f"{name} file {p} does not exist")
            return p
        p = self.stage_dir("synth") / f"{name}.csv" if name != "schema" else self.stage_dir("synth") / "schema.json"
        if name in ("panel", "macro", "schema") and not p.exists():
            raise MissingUpstream("synth", p)
        return p if p.exists() else None

    def load(self):
        schema = load_schema(self.input_path("schema"))
        panel = load_panel(self.input_path("panel"), schema)
        macro = load_macro(self.input_path("macro"))
        return panel, schema.meta, macro

    def manifest(self, stage: str, inputs: Sequence[Path], outputs: Sequence[Path]) -> Path:
        d = self.stage_dir(stage)
        doc = {
            "stage": stage,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.canonical(),
            "seed": self.cfg.seed,
            "version": f"v{__version__}",
            "inputs": {str(p): sha256(p) for p in sorted(set(inputs))},
            "outputs": {str(p.relative_to(d)): sha256(p) for p in sorted(set(outputs))},
        }
        path = d / "manifest.json"
        tc.atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        logger.info("%s: wrote %d outputs to %s", stage, len(outputs), d)
        return path


def verify_manifest(path: str | Path) -> list[str]:
    """Files whose current checksum differs from the manifest (or are missing)."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    bad = []
    entries = [(Path(p), h) for p, h in doc.get("inputs", {}).items()]
    entries += [(path.parent / p, h) for p, h in doc.get("outputs", {}).items()]
    for p, h in entries:
        if not p.exists() or sha256(p) != h:
            bad.append(str(p))
    return bad


# ---------------------------------------------------------------------------
# stages


def cmd_synth(exp: Experiment) -> Path:
    d = exp.stage_dir("synth")
    paths = synth.write_synthetic(d, exp.cfg.synth_config())
    return exp.manifest("synth", [], list(paths.values()))


def _windows_doc(data: pl.LaggedData, preps: Sequence[pl.PreparedWindow]) -> dict[str, Any]:
    lab = lambda r: [month_label(r[0]), month_label(r[1])]  # noqa: E731
    return {
        "sample_start": month_label(data.start),
        "data_end": month_label(data.end),
        "windows": [
            {
                "index": p.window.index,
                "train": lab(p.window.train),
                "val": lab(p.window.val),
                "test": lab(p.window.test),
                "characteristics": p.characteristics,
            }
            for p in preps
        ],
    }


def cmd_preprocess(exp: Experiment) -> Path:
    pcfg = exp.cfg.pipeline_config()
    panel, meta, _ = exp.load()
    data = pl.prepare(panel, meta, pcfg.sample_start)
    d = exp.stage_dir("preprocess")
    outputs = []
    preps = []
    for w in pl.windows_for(data, pcfg):
        logger.info(w.describe())
        prep = pl.preprocess_window(data, w, pcfg)
        preps.append(prep)
        outputs.append(write_csv(with_dates(prep.fit), d / f"window_{w.index}" / "fit.csv"))
        outputs.append(write_csv(with_dates(prep.test), d / f"window_{w.index}" / "test.csv"))
    doc_path = d / "windows.json"
    tc.atomic_write_text(doc_path, json.dumps(_windows_doc(data, preps), indent=2) + "\n")
    outputs.append(doc_path)
    return exp.manifest("preprocess", [exp.input_path("panel"), exp.input_path("schema")], outputs)


def _window_from_doc(entry: dict[str, Any]) -> ev.WindowSplit:
    rng = lambda r: (month_index(r[0]), month_index(r[1]))  # noqa: E731
    return ev.WindowSplit(entry["index"], rng(entry["train"]), rng(entry["val"]), rng(entry["test"]))


def _windows(exp: Experiment) -> tuple[dict[str, Any], list[ev.WindowSplit]]:
    d = exp.require("preprocess", "windows.json")
    doc = json.loads((d / "windows.json").read_text(encoding="utf-8"))
    return doc, [_window_from_doc(e) for e in doc["windows"]]


def cmd_train_macro(exp: Experiment) -> Path:
    pcfg = exp.cfg.pipeline_config()
    doc, windows = _windows(exp)
    macro = load_macro(exp.input_path("macro"))
    start = month_index(doc["sample_start"])
    d = exp.stage_dir("train-macro")
    outputs = []
    for w in windows:
        comp, latent = pl.compress_window(macro, w, start, pcfg)
        wdir = d / f"window_{w.index}"
        wdir.mkdir(parents=True, exist_ok=True)
        if isinstance(comp.model, me.AutoencoderModel):
            comp.model.save(wdir / "autoencoder.json", seed=pcfg.base_seed)
            outputs.append(wdir / "autoencoder.json")
        elif isinstance(comp.model, me.PcaBasis):
            comp.model.to_csv(wdir / "pca.csv")
            outputs.append(wdir / "pca.csv")
        me.latent_to_csv(latent.months, latent.values, wdir / "latent.csv")
        outputs.append(wdir / "latent.csv")
    return exp.manifest("train-macro", [exp.input_path("macro"), exp.stage_dir("preprocess") / "manifest.json"], outputs)


def _window_data(exp: Experiment, doc: dict[str, Any], w: ev.WindowSplit) -> pl.WindowData:
    pre = exp.require("preprocess", f"window_{w.index}/fit.csv", f"window_{w.index}/test.csv")
    mac = exp.require("train-macro", f"window_{w.index}/latent.csv")
    entry = next(e for e in doc["windows"] if e["index"] == w.index)
    fit = from_dates(read_csv(pre / f"window_{w.index}" / "fit.csv"))
    test = from_dates(read_csv(pre / f"window_{w.index}" / "test.csv"))
    lat = read_csv(mac / f"window_{w.index}" / "latent.csv")
    months = np.array([month_index(x) for x in lat["date"]])
    names = [c for c in lat.columns if c != "date"]
    latent = MacroMatrix(months, lat[names].to_numpy(dtype=float), names)
    return pl.assemble_window(pl.PreparedWindow(w, list(entry["characteristics"]), fit, test), latent)


def _fit_dir(exp: Experiment, window: int, lam: float, h: int) -> Path:
    return exp.stage_dir("train") / f"window_{window}" / f"lambda_{pl.lambda_label(lam)}_h{h}"


def _fit_task(args):
    wd, lam, h, pcfg = args
    return pl.fit_window(wd, lam, h, pcfg)


def cmd_train(exp: Experiment) -> Path:
    pcfg = exp.cfg.pipeline_config()
    doc, windows = _windows(exp)
    exp.require("train-macro")
    wds = [_window_data(exp, doc, w) for w in windows]
    tasks = [(wd, lam, h, pcfg) for wd in wds for lam in pcfg.lambdas for h in pcfg.horizons]
    if exp.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=exp.jobs) as pool:
            fits = list(pool.map(_fit_task, tasks))
    else:
        fits = [_fit_task(t) for t in tasks]
    outputs = []
    traces = []
    last = max(w.index for w in windows)
    for (wd, lam, h, _), (ens, results) in zip(tasks, fits):
        fdir = _fit_dir(exp, wd.window.index, lam, h)
        fdir.mkdir(parents=True, exist_ok=True)
        for seed, m, res in zip(cm.member_seeds(pcfg.base_seed, len(results)), ens.members, results):
            path = fdir / f"member_{seed}.json"
            m.save(path, seed=seed, control=res.control)
            outputs.append(path)
        hist = pd.DataFrame(
            [
                (seed, r.epoch, r.train_L_R, r.train_mean_L_C, r.val_loss, r.lr)
                for seed, res in zip(cm.member_seeds(pcfg.base_seed, len(results)), results)
                for r in res.history
            ],
            columns=["member_seed", "epoch", "L_R", "mean_L_C", "val_loss", "lr"],
        )
        outputs.append(write_csv(hist, fdir / "history.csv"))
        if wd.window.index == last and h == max(pcfg.horizons):
            traces.extend(
                (pl.lambda_label(lam), e, lr, lc) for e, lr, lc in cm.mean_member_history(results)
            )
    trace = pd.DataFrame(traces, columns=["lambda", "epoch", "L_R", "mean_L_C"])
    outputs.append(write_csv(trace, exp.stage_dir("train") / "mse_traces.csv"))
    inputs = [exp.stage_dir("preprocess") / "manifest.json", exp.stage_dir("train-macro") / "manifest.json"]
    return exp.manifest("train", inputs, outputs)


def _load_ensemble(exp: Experiment, window: int, lam: float, h: int) -> cm.Ensemble:
    fdir = _fit_dir(exp, window, lam, h)
    members = sorted(fdir.glob("member_*.json")) if fdir.exists() else []
    if not members:
        raise MissingUpstream("train", fdir / "member_*.json")
    return cm.Ensemble([cm.CbapmModel.load(p) for p in members])


def cmd_evaluate(exp: Experiment) -> Path:
    pcfg = exp.cfg.pipeline_config()
    doc, windows = _windows(exp)
    exp.require("train")
    frames = []
    for w in windows:
        wd = _window_data(exp, doc, w)
        for lam in pcfg.lambdas:
            for h in pcfg.horizons:
                frames.append(pl.predict_window(wd, _load_ensemble(exp, w.index, lam, h)))
    pred = pd.concat(frames, ignore_index=True)
    pred = pred.sort_values(["lambda", "h", "window", "month", "firm_id"], kind="stable").reset_index(drop=True)
    n_cons = len(pl.consensus_columns(pred))
    d = exp.stage_dir("evaluate")
    out_pred = pred.copy()
    out_pred["lambda"] = out_pred["lambda"].map(pl.lambda_label)
    outputs = [write_csv(with_dates(out_pred), d / "predictions.csv")]
    table = ev.r2_table(pred, n_cons)
    outputs.append(write_csv(table, d / "table1_r2.csv"))
    header = "\n".join(f"# {w.describe()}" for w in windows) + "\n"
    tc.atomic_write_text(d / "windows.txt", header)
    outputs.append(d / "windows.txt")
    traces = exp.stage_dir("train") / "mse_traces.csv"
    if traces.exists():
        tc.atomic_write_text(d / "mse_traces.csv", traces.read_text(encoding="utf-8"))
        outputs.append(d / "mse_traces.csv")
    return exp.manifest("evaluate", [exp.stage_dir("train") / "manifest.json"], outputs)


def _predictions(exp: Experiment) -> pd.DataFrame:
    d = exp.require("evaluate", "predictions.csv")
    pred = from_dates(read_csv(d / "predictions.csv"))
    pred["lambda"] = pred["lambda"].map(parse_lambda)
    return pred


def _portfolio_horizon(pred: pd.DataFrame) -> int:
    hs = sorted(set(pred["h"]))
    return 12 if 12 in hs else hs[-1]


def cmd_portfolio(exp: Experiment) -> Path:
    cfg = exp.cfg
    pred = _predictions(exp)
    h = _portfolio_horizon(pred)
    d = exp.stage_dir("portfolio")
    deciles, doubles, perf, costs, cum = [], [], [], [], []
    for lam, g in pred[pred["h"] == h].groupby("lambda", sort=True):
        if math.isinf(lam):
            continue  # the consensus-only head is never trained
        label = pl.lambda_label(lam)
        bt = pf.backtest(g)
        means = bt.decile_returns.mean()
        deciles.append({"lambda": label, **means.to_dict(), "H-L": means["D10"] - means["D1"]})
        sorts = []
        degenerate = 0
        for m, gm in g.groupby("month", sort=True):
            s = pf.double_sort(gm["c_hat_1"], gm["r_hat"], gm["size"], gm["ret_1"], gm["firm_id"].to_numpy(), cfg.double_sort)
            sorts.append(s)
            degenerate += s.degenerate
        tab = pf.double_sort_table(sorts).reset_index()
        tab.insert(0, "lambda", label)
        tab["degenerate_months"] = degenerate
        doubles.append(tab)
        series = bt.long_short
        to = series.turnover_series()
        if cfg.turnover_legs == "mean":
            to = to / len(series.legs)
        for c in cfg.costs_bps:
            net, metrics = pf.apply_transaction_costs(series.returns, to, c)
            row = {"lambda": label, "cost_bps": c, **metrics.as_dict()}
            costs.append(row)
            if c == 0:
                perf.append({k: v for k, v in row.items() if k != "cost_bps"})
        cum.append(pd.DataFrame({
            "month": series.months + 1, "lambda": label, "return": series.returns,
            "cum_log": np.cumsum(series.log_returns),
        }))
    if not perf:
        raise ValueError("portfolio stage needs at least one finite lambda")
    outputs = [
        write_csv(pd.DataFrame(deciles), d / "table2_deciles.csv"),
        write_csv(pd.concat(doubles, ignore_index=True), d / "table3_double_sort.csv"),
        write_csv(pd.DataFrame(perf), d / "table4_portfolio.csv"),
        write_csv(pd.DataFrame(costs), d / "tableD4_costs.csv"),
        write_csv(with_dates(pd.concat(cum, ignore_index=True)), d / "cumulative_returns.csv"),
    ]
    return exp.manifest("portfolio", [exp.stage_dir("evaluate") / "predictions.csv"], outputs)


def _series_csv(path: Path) -> pd.DataFrame:
    df = read_csv(path)
    df.index = [month_index(x) for x in df.pop("date")]
    return df


def cmd_diagnostics(exp: Experiment) -> Path:
    cfg = exp.cfg
    pred = _predictions(exp)
    h = _portfolio_horizon(pred)
    finite = sorted(x for x in set(pred["lambda"]) if not math.isinf(x))
    lam = cfg.diagnostics_lambda if cfg.diagnostics_lambda is not None else (finite[-1] if finite else math.inf)
    g = pred[(pred["h"] == h) & (pred["lambda"] == lam)]
    if g.empty:
        raise ValueError(f"no predictions for lambda={lam} at h={h}")
    c_cols = pl.consensus_columns(g)
    ch_cols = [f"c_hat_{c[2:]}" for c in c_cols]
    per, _ = ev.oos_r2_consensus(g[ch_cols].to_numpy(), g[c_cols].to_numpy())
    d = exp.stage_dir("diagnostics")

    ols_rows = []
    for panel_name, cols in (("A_realized_consensus", c_cols), ("B_approximated_consensus", ch_cols)):
        res = dg.pooled_ols_dk(g["r"], g[cols].to_numpy(), g["month"].to_numpy(), names=cols, bandwidth=cfg.bandwidth)
        tab = res.to_frame()
        tab.insert(0, "panel", panel_name)
        tab["approx_r2_pct"] = [np.nan, *(per if panel_name.startswith("B") else [np.nan] * len(cols))]
        tab["adj_r2"] = res.adj_r2
        tab["nobs"] = res.nobs
        ols_rows.append(tab)
    outputs = [write_csv(pd.concat(ols_rows, ignore_index=True), d / "table5_ols.csv")]

    fs = dg.factor_mimicking(g, ch_cols)
    fac = fs.returns
    T = len(fac)
    summary = pd.DataFrame({
        "factor": fac.columns,
        "mean": fac.mean().to_numpy(),
        "t": (fac.mean() / (fac.std(ddof=1) / math.sqrt(T))).to_numpy() if T > 1 else np.nan,
        "degenerate": [fs.degenerate[c] for c in fac.columns],
    })
    outputs.append(write_csv(summary, d / "table6_factors.csv"))
    outputs.append(write_csv(with_dates(fac.rename_axis("month").reset_index()), d / "cbapm_factors.csv"))

    inputs = [exp.stage_dir("evaluate") / "predictions.csv"]
    assets_path = exp.input_path("test_assets")
    if assets_path is not None:
        inputs.append(assets_path)
        # every model is tested on the months the mimicking factors cover
        assets = _series_csv(assets_path).reindex(fac.index).dropna()
        models: dict[str, pd.DataFrame] = {}
        factors_path = exp.input_path("factors")
        if factors_path is not None:
            inputs.append(factors_path)
            bench = _series_csv(factors_path)
            spec = cfg.factor_models or {bench.columns[0]: [bench.columns[0]], "all_benchmark": list(bench.columns)}
            for name, cols in spec.items():
                models[name] = bench[cols]
        models["cbapm"] = fac
        rows = []
        for name, factors in models.items():
            try:
                rows.append({"model": name, **dg.grs_table(assets, {name: factors}).iloc[0].drop("model").to_dict(), "error": ""})
            except ValueError as exc:
                logger.warning("GRS for %s skipped: %s", name, exc)
                rows.append({"model": name, "error": str(exc)})
        outputs.append(write_csv(pd.DataFrame(rows), d / "table5_grs.csv"))
    return exp.manifest("diagnostics", inputs, outputs)


STAGE_FUNCS: dict[str, Callable[[Experiment], Path]] = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train-macro": cmd_train_macro,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "portfolio": cmd_portfolio,
    "diagnostics": cmd_diagnostics,
}


def cmd_pipeline(exp: Experiment) -> Path:
    """Run every stage in order; the synthetic stage runs only without data paths."""
    stages = [s for s in STAGES if s != "synth" or exp.cfg.panel is None]
    manifests = {}
    for s in stages:
        manifests[s] = STAGE_FUNCS[s](exp)
    doc = {
        "config_hash": exp.cfg.hash(),
        "version": f"v{__version__}",
        "stages": {s: {"manifest": str(p.relative_to(exp.dir)), "sha256": sha256(p)} for s, p in manifests.items()},
    }
    path = exp.dir / "manifest.json"
    tc.atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def cmd_verify(exp: Experiment) -> list[str]:
    bad = []
    for s in STAGES:
        m = exp.stage_dir(s) / "manifest.json"
        if m.exists():
            bad.extend(verify_manifest(m))
    return bad


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbapm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cbapm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out", help="output root (overrides $CBAPM_OUT and the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for training")
    common.add_argument("--lambda", dest="lambdas", nargs="+", help="lambda grid, 'inf' for consensus-only")
    common.add_argument("--horizon", dest="horizons", type=int, nargs="+", help="return horizons in months")
    common.add_argument("--seed", type=int)
    common.add_argument("--profile", choices=PROFILES)
    common.add_argument("--compressor", choices=me.COMPRESSOR_KINDS)
    common.add_argument("--latent-dim", type=int)
    common.add_argument("--ensemble-size", type=int)
    common.add_argument("--max-epochs", type=int)
    common.add_argument("--max-windows", type=int)
    common.add_argument("--first-train-end", help="YYYY-MM")
    common.add_argument("--double-sort", choices=("conditional", "independent"))
    common.add_argument("--costs", dest="costs_bps", type=float, nargs="+", help="transaction costs in bps")
    common.add_argument("-v", "--verbose", action="count", default=0)
    for name in (*STAGES, "pipeline", "verify"):
        sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name in STAGES else None)
    return parser


OVERRIDE_KEYS = (
    "lambdas", "horizons", "seed", "profile", "compressor", "latent_dim", "ensemble_size",
    "max_epochs", "max_windows", "first_train_end", "double_sort", "costs_bps",
)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        overrides = {k: getattr(args, k) for k in OVERRIDE_KEYS}
        cfg = load_config(args.config, overrides)
        exp = Experiment(cfg, args.out, jobs=max(1, args.jobs))
        if args.command == "verify":
            bad = cmd_verify(exp)
            for b in bad:
                print(f"checksum mismatch: {b}", file=sys.stderr)
            return EXIT_FAILURE if bad else EXIT_OK
        path = cmd_pipeline(exp) if args.command == "pipeline" else STAGE_FUNCS[args.command](exp)
        print(path)
        return EXIT_OK
    except ConfigError as exc:
        print(f"cbapm: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingUpstream as exc:
        print(f"cbapm: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"cbapm: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
