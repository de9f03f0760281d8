"""Consensus-bottleneck return model.

A nonlinear consensus network maps firm and macro inputs to 9 consensus
approximations; a bare affine head maps those 9 numbers to the return
forecast. Training minimises ``L_R + lam * sum(L_C)``. ``lam = inf`` selects a
consensus-only mode that optimises ``sum(L_C)`` and leaves the head untouched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc

logger = logging.getLogger(__name__)

N_CONSENSUS = 9
CONSENSUS_ONLY = math.inf
HEAD_W = "head_W"
HEAD_B = "head_b"


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (64, 32)
    n_consensus: int = N_CONSENSUS
    batch_size: int = 5000
    lr: float = 1e-3
    weight_decay: float = 5e-3
    decoupled_decay: bool = True
    dropout: float = 0.5
    layer_norm: bool = True
    grad_clip: float = 1.0
    clip_mode: str = "norm"
    scheduler_patience: int = 2
    scheduler_factor: float = 0.2
    early_stop_patience: int = 5
    max_epochs: int | None = None
    ensemble_size: int = 10

    def __post_init__(self) -> None:
        self.hidden = tuple(self.hidden)
        if self.batch_size <= 0 or self.ensemble_size <= 0:
            raise ValueError("batch_size and ensemble_size must be positive")
        if self.clip_mode not in ("norm", "value"):
            raise ValueError(f"unknown clip mode {self.clip_mode!r}")


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if math.isnan(lam) or lam < 0:
        raise ValueError(f"lambda must be non-negative or inf, got {lam}")
    return lam


@dataclass
class CbapmModel:
    input_dim: int
    params: tc.Params
    lam: float
    horizon: int
    hidden: tuple[int, ...] = (64, 32)
    n_consensus: int = N_CONSENSUS
    layer_norm: bool = True
    dropout: float = 0.5

    @property
    def consensus_net(self) -> tc.MlpSpec:
        return tc.MlpSpec(
            (self.input_dim, *self.hidden, self.n_consensus),
            layer_norm=self.layer_norm,
            dropout=self.dropout,
            prefix="f_",
        )

    def save(self, path: str | Path, seed: int, control: tc.TrainControl | None = None) -> None:
        meta = {
            "kind": "cbapm",
            "input_dim": self.input_dim,
            "lambda": "inf" if math.isinf(self.lam) else self.lam,
            "horizon": self.horizon,
            "hidden": list(self.hidden),
            "n_consensus": self.n_consensus,
            "layer_norm": self.layer_norm,
            "dropout": self.dropout,
        }
        tc.save_checkpoint(path, self.params, seed=seed, control=control, meta=meta)

    @classmethod
    def load(cls, path: str | Path) -> "CbapmModel":
        doc = tc.load_checkpoint(path)
        m = doc["meta"]
        if m.get("kind") != "cbapm":
            raise ValueError(f"{path}: not a model checkpoint")
        return cls(
            m["input_dim"],
            doc["params"],
            float(m["lambda"]),
            m["horizon"],
            tuple(m["hidden"]),
            m["n_consensus"],
            m["layer_norm"],
            m["dropout"],
        )


def init_model(
    input_dim: int, lam: float, horizon: int, config: ModelConfig, rng: np.random.Generator
) -> CbapmModel:
    model = CbapmModel(
        input_dim, {}, check_lambda(lam), horizon, config.hidden, config.n_consensus, config.layer_norm, config.dropout
    )
    params = model.consensus_net.init(rng)
    head = tc.he_init(1, config.n_consensus, rng)
    params[HEAD_W], params[HEAD_B] = head.W, head.b
    model.params = params
    return model


# ---------------------------------------------------------------------------
# forward / loss


def head(model: CbapmModel, c_hat: np.ndarray) -> np.ndarray:
    """Affine prediction layer applied to consensus values (rows)."""
    c_hat = np.asarray(c_hat, dtype=float)
    return c_hat @ model.params[HEAD_W][0] + model.params[HEAD_B][0]


def _rows(model: CbapmModel, X: np.ndarray) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = X[None, :] if single else X
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(f"model expects inputs of length {model.input_dim}, got shape {X.shape}")
    return X, single


def forward(
    model: CbapmModel, X: np.ndarray, *, training: bool = False, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(c_hat, r_hat)``; a 1-D input yields a 9-vector and a scalar."""
    Xr, single = _rows(model, X)
    c_hat, _ = model.consensus_net.forward(model.params, Xr, training=training, rng=rng)
    r_hat = head(model, c_hat)
    if single:
        return c_hat[0], r_hat[0]
    return c_hat, r_hat


def _check_targets(C: np.ndarray, R: np.ndarray, n: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    C = np.asarray(C, dtype=float).reshape(n, k)
    R = np.asarray(R, dtype=float).reshape(n)
    if not (np.isfinite(C).all() and np.isfinite(R).all()):
        raise ValueError("consensus and return targets must be finite")
    return C, R


def combine(lam: float, L_R: float, L_C: np.ndarray) -> float:
    if math.isinf(lam):
        return float(np.sum(L_C))
    return float(L_R + lam * np.sum(L_C))


def joint_loss(
    model: CbapmModel, X: np.ndarray, C: np.ndarray, R: np.ndarray, lam: float | None = None
) -> tuple[float, float, np.ndarray]:
    """``(L, L_R, L_C)`` in inference mode; ``lam`` defaults to the model's."""
    lam = model.lam if lam is None else check_lambda(lam)
    Xr, _ = _rows(model, X)
    C, R = _check_targets(C, R, len(Xr), model.n_consensus)
    c_hat, r_hat = forward(model, Xr)
    L_R = float(np.mean((r_hat - R) ** 2))
    L_C = np.mean((c_hat - C) ** 2, axis=0)
    return combine(lam, L_R, L_C), L_R, L_C


def loss_and_grads(
    model: CbapmModel,
    X: np.ndarray,
    C: np.ndarray,
    R: np.ndarray,
    lam: float | None = None,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, float, np.ndarray, tc.Params]:
    """Joint loss and its gradient with respect to every parameter.

    In consensus-only mode the head receives no gradient entry.
    """
    lam = model.lam if lam is None else check_lambda(lam)
    Xr, _ = _rows(model, X)
    n = len(Xr)
    if n == 0:
        raise ValueError("empty batch")
    C, R = _check_targets(C, R, n, model.n_consensus)
    net = model.consensus_net
    c_hat, cache = net.forward(model.params, Xr, training=training, rng=rng)
    r_hat = head(model, c_hat)
    r_err = r_hat - R
    c_err = c_hat - C
    L_R = float(np.mean(r_err**2))
    L_C = np.mean(c_err**2, axis=0)

    grads: tc.Params = {}
    if math.isinf(lam):
        d_c = 2.0 * c_err / n
    else:
        d_r = 2.0 * r_err / n
        grads[HEAD_W] = (d_r @ c_hat)[None, :]
        grads[HEAD_B] = np.array([d_r.sum()])
        d_c = np.outer(d_r, model.params[HEAD_W][0])
        if lam != 0.0:
            d_c = d_c + lam * 2.0 * c_err / n
    g_net, _ = net.backward(model.params, cache, d_c)
    grads.update(g_net)
    return combine(lam, L_R, L_C), L_R, L_C, grads


def return_loss_grads(model: CbapmModel, X: np.ndarray, R: np.ndarray) -> tuple[float, tc.Params]:
    """Gradient of the return loss alone (the plain return-prediction model)."""
    Xr, _ = _rows(model, X)
    R = np.asarray(R, dtype=float).reshape(len(Xr))
    net = model.consensus_net
    c_hat, cache = net.forward(model.params, Xr)
    w = model.params[HEAD_W][0]
    err = c_hat @ w + model.params[HEAD_B][0] - R
    d_r = 2.0 * err / len(Xr)
    grads, _ = net.backward(model.params, cache, np.outer(d_r, w))
    grads[HEAD_W] = (d_r @ c_hat)[None, :]
    grads[HEAD_B] = np.array([d_r.sum()])
    return float(np.mean(err**2)), grads


def extract_prediction_coefficients(model: "CbapmModel | Ensemble") -> tuple[np.ndarray, float]:
    """``(weights, bias)`` of the linear map from consensus to return."""
    if isinstance(model, Ensemble):
        ws, bs = zip(*(extract_prediction_coefficients(m) for m in model.members))
        return np.mean(ws, axis=0), float(np.mean(bs))
    return model.params[HEAD_W][0].copy(), float(model.params[HEAD_B][0])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainData:
    X: np.ndarray
    C: np.ndarray
    R: np.ndarray
    X_val: np.ndarray
    C_val: np.ndarray
    R_val: np.ndarray

    def __post_init__(self) -> None:
        if len(self.X) == 0:
            raise ValueError("empty training window")
        if len(self.X_val) == 0:
            raise ValueError("empty validation window")


@dataclass
class EpochRecord:
    epoch: int
    train_L_R: float
    train_mean_L_C: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: CbapmModel
    control: tc.TrainControl
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_sequence: list[float] = field(default_factory=list)


def train(
    data: TrainData,
    lam: float,
    horizon: int,
    config: ModelConfig,
    seed: int,
    *,
    record_insample: bool = False,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Fit one model by mini-batch Adam on the joint loss.

    Every epoch reshuffles the training rows, then evaluates the joint loss on
    the validation rows (inference mode) for the plateau scheduler and early
    stopping. The parameters from the best validation epoch are returned.
    With ``record_insample`` each :class:`EpochRecord` also carries the
    inference-mode training ``L_R`` and mean ``L_C``.
    """
    lam = check_lambda(lam)
    rng = tc.make_rng(seed)
    model = init_model(data.X.shape[1], lam, horizon, config, rng)
    state = tc.AdamState(lr=config.lr, weight_decay=config.weight_decay, decoupled=config.decoupled_decay)
    control = tc.TrainControl(
        scheduler_patience=config.scheduler_patience,
        scheduler_factor=config.scheduler_factor,
        early_stop_patience=config.early_stop_patience,
        grad_clip=config.grad_clip,
        dropout_p=config.dropout,
    )
    result = TrainResult(model, control)
    best = tc.copy_params(model.params)
    n = len(data.X)
    epoch = 0
    while config.max_epochs is None or epoch < config.max_epochs:
        epoch += 1
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            *_, grads = loss_and_grads(model, data.X[idx], data.C[idx], data.R[idx], lam, training=True, rng=rng)
            grads = tc.clip_gradients(grads, config.grad_clip, config.clip_mode)
            tc.adam_step(model.params, grads, state)
        val, _, _ = joint_loss(model, data.X_val, data.C_val, data.R_val, lam)
        if not math.isfinite(val):
            raise FloatingPointError(f"validation loss diverged at epoch {epoch}")
        if record_insample:
            _, tr_R, tr_C = joint_loss(model, data.X, data.C, data.R, lam)
            rec = EpochRecord(epoch, tr_R, float(np.mean(tr_C)), val, state.lr)
        else:
            rec = EpochRecord(epoch, math.nan, math.nan, val, state.lr)
        result.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if val < control.best_val:
            best = tc.copy_params(model.params)
            result.best_epoch = epoch
            result.best_val_sequence.append(val)
        if tc.lr_on_plateau(control, val):
            state.lr *= control.scheduler_factor
        if tc.early_stop(control, val):
            break
    model.params = best
    logger.debug("lambda=%s h=%d seed=%d: best epoch %d of %d", lam, horizon, seed, result.best_epoch, epoch)
    return result


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class Ensemble:
    members: list[CbapmModel]

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            same = (m.input_dim, m.hidden, m.lam, m.horizon) == (first.input_dim, first.hidden, first.lam, first.horizon)
            if not same:
                raise ValueError("ensemble members must share architecture, lambda and horizon")

    @property
    def lam(self) -> float:
        return self.members[0].lam

    @property
    def horizon(self) -> int:
        return self.members[0].horizon


def ensemble_predict(ensemble: Ensemble, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average of member consensus and return predictions.

    Members are summed in a canonical order (sorted by parameter bytes) so the
    result is bit-identical under any permutation of ``members``.
    """
    outs = [forward(m, X) for m in ensemble.members]
    keys = [_param_key(m) for m in ensemble.members]
    order = sorted(range(len(outs)), key=lambda i: keys[i])
    c = np.mean(np.stack([outs[i][0] for i in order]), axis=0)
    r = np.mean(np.stack([outs[i][1] for i in order]), axis=0)
    return c, r


def _param_key(model: CbapmModel) -> bytes:
    return b"".join(np.ascontiguousarray(model.params[k]).tobytes() for k in sorted(model.params))


def member_seeds(base_seed: int, size: int) -> list[int]:
    return [base_seed + i for i in range(size)]


def train_ensemble(
    data: TrainData,
    lam: float,
    horizon: int,
    config: ModelConfig,
    base_seed: int,
    *,
    record_insample: bool = False,
) -> tuple[Ensemble, list[TrainResult]]:
    results = [
        train(data, lam, horizon, config, s, record_insample=record_insample)
        for s in member_seeds(base_seed, config.ensemble_size)
    ]
    return Ensemble([r.model for r in results]), results


def mean_member_history(results: Sequence[TrainResult]) -> list[tuple[int, float, float]]:
    """Per-epoch ``(epoch, L_R, mean L_C)`` averaged over members still training."""
    longest = max(len(r.history) for r in results)
    out = []
    for e in range(longest):
        recs = [r.history[e] for r in results if len(r.history) > e]
        out.append((e + 1, float(np.mean([x.train_L_R for x in recs])), float(np.mean([x.train_mean_L_C for x in recs]))))
    return out
