"""Compression of the macro state vector: autoencoder, PCA, or passthrough.

Every fit sees only the months in its ``fit_range``; later months are
transformed with the frozen fit.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .panel_data import MacroMatrix, month_label

logger = logging.getLogger(__name__)

COMPRESSOR_KINDS = ("autoencoder", "pca", "none")


@dataclass
class AutoencoderConfig:
    hidden: tuple[int, ...] = (128, 64)
    latent_dim: int = 32
    dropout: float = 0.2
    batch_size: int = 1
    lr: float = 5e-5
    weight_decay: float = 0.0
    early_stop_patience: int = 2500
    max_epochs: int | None = None
    val_fraction: float = 0.10

    def __post_init__(self) -> None:
        self.hidden = tuple(self.hidden)
        if self.latent_dim <= 0 or self.batch_size <= 0:
            raise ValueError("latent_dim and batch_size must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class AutoencoderModel:
    input_dim: int
    latent_dim: int
    hidden: tuple[int, ...]
    dropout: float
    params: tc.Params
    history: list[float] = field(default_factory=list)

    @property
    def encoder(self) -> tc.MlpSpec:
        return tc.MlpSpec((self.input_dim, *self.hidden, self.latent_dim), dropout=self.dropout, prefix="enc_")

    @property
    def decoder(self) -> tc.MlpSpec:
        return tc.MlpSpec((self.latent_dim, *self.hidden[::-1], self.input_dim), dropout=self.dropout, prefix="dec_")

    def save(self, path: str | Path, seed: int) -> None:
        meta = {
            "kind": "autoencoder",
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "hidden": list(self.hidden),
            "dropout": self.dropout,
            "history": self.history,
        }
        tc.save_checkpoint(path, self.params, seed=seed, meta=meta)

    @classmethod
    def load(cls, path: str | Path) -> "AutoencoderModel":
        doc = tc.load_checkpoint(path)
        m = doc["meta"]
        if m.get("kind") != "autoencoder":
            raise ValueError(f"{path}: not an autoencoder checkpoint")
        return cls(m["input_dim"], m["latent_dim"], tuple(m["hidden"]), m["dropout"], doc["params"], list(m["history"]))


def _as_rows(x: np.ndarray, width: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != width:
        raise ValueError(f"expected vectors of length {width}, got shape {x.shape}")
    return X, single


def encode(model: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    """Latent state for one macro vector or a (months x D) matrix."""
    X, single = _as_rows(x, model.input_dim)
    z, _ = model.encoder.forward(model.params, X)
    return z[0] if single else z


def decode(model: AutoencoderModel, z: np.ndarray) -> np.ndarray:
    Z, single = _as_rows(z, model.latent_dim)
    x, _ = model.decoder.forward(model.params, Z)
    return x[0] if single else x


def reconstruct(model: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    return decode(model, encode(model, x))


def reconstruction_loss(model: AutoencoderModel, X: np.ndarray) -> float:
    """Mean over rows of the squared reconstruction norm."""
    X, _ = _as_rows(X, model.input_dim)
    err = reconstruct(model, X) - X
    return float(np.mean(np.sum(err * err, axis=1)))


def _fit_rows(macro: MacroMatrix, fit_range: tuple[int, int]) -> np.ndarray:
    start, end = fit_range
    rows = macro.slice_months(start, end).values
    if len(rows) < 2:
        raise ValueError(
            f"autoencoder fit range {month_label(start)}..{month_label(end)} has {len(rows)} month(s); need at least 2"
        )
    if not np.isfinite(rows).all():
        raise ValueError("macro fit range contains non-finite values")
    return rows


def train_autoencoder(
    macro: MacroMatrix,
    fit_range: tuple[int, int],
    config: AutoencoderConfig | None = None,
    rng: np.random.Generator | None = None,
    *,
    seed: int = 0,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> AutoencoderModel:
    """Fit encoder and decoder on the months of ``fit_range`` only.

    The final ``val_fraction`` of those months drives early stopping and the
    best-validation parameters are returned. ``history`` records the
    validation loss each time a new best is reached.
    """
    config = config or AutoencoderConfig()
    rng = rng if rng is not None else tc.make_rng(seed)
    X = _fit_rows(macro, fit_range)
    T = len(X)
    n_val = max(1, int(round(config.val_fraction * T)))
    n_val = min(n_val, T - 1)
    X_train, X_val = X[: T - n_val], X[T - n_val :]

    model = AutoencoderModel(X.shape[1], config.latent_dim, config.hidden, config.dropout, {})
    enc, dec = model.encoder, model.decoder
    model.params = {**enc.init(rng), **dec.init(rng)}
    state = tc.AdamState(lr=config.lr, weight_decay=config.weight_decay)
    control = tc.TrainControl(early_stop_patience=config.early_stop_patience, dropout_p=config.dropout)
    best = tc.copy_params(model.params)

    epoch = 0
    while config.max_epochs is None or epoch < config.max_epochs:
        epoch += 1
        order = rng.permutation(len(X_train))
        train_loss = 0.0
        for lo in range(0, len(order), config.batch_size):
            xb = X_train[order[lo : lo + config.batch_size]]
            z, c_enc = enc.forward(model.params, xb, training=True, rng=rng)
            xh, c_dec = dec.forward(model.params, z, training=True, rng=rng)
            err = xh - xb
            train_loss += float(np.sum(err * err))
            g_dec, dz = dec.backward(model.params, c_dec, 2.0 * err / len(xb))
            g_enc, _ = enc.backward(model.params, c_enc, dz)
            tc.adam_step(model.params, {**g_enc, **g_dec}, state)
        val = reconstruction_loss(model, X_val)
        if not math.isfinite(val):
            raise FloatingPointError("autoencoder validation loss diverged")
        if on_epoch is not None:
            on_epoch(epoch, train_loss / len(X_train), val)
        if val < control.best_val:
            best = tc.copy_params(model.params)
            model.history.append(val)
        if tc.early_stop(control, val):
            break
    model.params = best
    logger.debug("autoencoder stopped after %d epochs, best val %.6g", epoch, control.best_val)
    return model


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray  # (D, d), orthonormal columns (zero columns if rank-deficient)
    eigenvalues: np.ndarray

    @property
    def latent_dim(self) -> int:
        return self.components.shape[1]

    def to_csv(self, path: str | Path) -> None:
        d = self.latent_dim
        lines = [",".join(["variable", "mean", *[f"pc{j + 1}" for j in range(d)]])]
        for i in range(len(self.mean)):
            lines.append(",".join([f"x{i + 1}", repr(float(self.mean[i])), *[repr(float(v)) for v in self.components[i]]]))
        lines.append(",".join(["eigenvalue", "", *[repr(float(v)) for v in self.eigenvalues]]))
        tc.atomic_write_text(path, "\n".join(lines) + "\n")


def pca_fit(macro: MacroMatrix, fit_range: tuple[int, int], d: int) -> PcaBasis:
    """Top-``d`` eigenvectors of the fit-range covariance.

    Eigenvalues are returned in descending order; each eigenvector's sign is
    fixed so its largest-magnitude entry is positive.
    """
    start, end = fit_range
    X = macro.slice_months(start, end).values
    if len(X) < d:
        raise ValueError(f"PCA needs at least {d} months in the fit range, got {len(X)}")
    if d > X.shape[1]:
        raise ValueError(f"latent dimension {d} exceeds macro dimension {X.shape[1]}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(len(X) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:d]
    vals, vecs = vals[order], vecs[:, order]
    for j in range(d):
        k = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[k, j] < 0:
            vecs[:, j] = -vecs[:, j]
    tol = max(vals.max(initial=0.0), 0.0) * X.shape[1] * np.finfo(float).eps * 10
    null = vals <= tol
    if null.any():
        warnings.warn(
            f"macro covariance has only {int((~null).sum())} non-zero eigenvalues; padding {int(null.sum())} zero components",
            RuntimeWarning,
            stacklevel=2,
        )
        vecs[:, null] = 0.0
        vals = np.where(null, 0.0, vals)
    return PcaBasis(mean, vecs, vals)


def pca_project(basis: PcaBasis, x: np.ndarray) -> np.ndarray:
    X, single = _as_rows(x, len(basis.mean))
    z = (X - basis.mean) @ basis.components
    return z[0] if single else z


# ---------------------------------------------------------------------------
# unified interface


@dataclass(frozen=True)
class CompressorChoice:
    kind: str = "autoencoder"
    d: int = 32

    def __post_init__(self) -> None:
        if self.kind not in COMPRESSOR_KINDS:
            raise ValueError(f"unknown compressor {self.kind!r}; choose from {COMPRESSOR_KINDS}")
        if self.kind != "none" and self.d <= 0:
            raise ValueError("latent dimension must be positive")


@dataclass
class FittedCompressor:
    choice: CompressorChoice
    model: AutoencoderModel | PcaBasis | None = None

    @property
    def output_dim(self) -> int | None:
        return None if self.choice.kind == "none" else self.choice.d

    def transform(self, values: np.ndarray) -> np.ndarray:
        if self.choice.kind == "none":
            return np.asarray(values, dtype=float).copy()
        if self.choice.kind == "pca":
            return pca_project(self.model, values)  # type: ignore[arg-type]
        return encode(self.model, values)  # type: ignore[arg-type]


def fit_compressor(
    choice: CompressorChoice,
    macro: MacroMatrix,
    fit_range: tuple[int, int],
    config: AutoencoderConfig | None = None,
    *,
    seed: int = 0,
) -> FittedCompressor:
    if choice.kind == "none":
        return FittedCompressor(choice)
    if choice.kind == "pca":
        return FittedCompressor(choice, pca_fit(macro, fit_range, choice.d))
    config = config or AutoencoderConfig()
    if config.latent_dim != choice.d:
        config = AutoencoderConfig(**{**config.__dict__, "latent_dim": choice.d})
    return FittedCompressor(choice, train_autoencoder(macro, fit_range, config, seed=seed))


def build_model_input(firm: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Concatenate firm features and macro latent, firm block first.

    Accepts single vectors or row-aligned matrices.
    """
    firm = np.asarray(firm, dtype=float)
    z = np.asarray(z, dtype=float)
    if firm.shape[-1] == 0:
        raise ValueError("firm feature vector must not be empty")
    if firm.ndim != z.ndim or (firm.ndim == 2 and firm.shape[0] != z.shape[0]):
        raise ValueError(f"cannot align firm block {firm.shape} with macro block {z.shape}")
    return np.concatenate([firm, z], axis=-1)


def latent_to_csv(months: np.ndarray, z: np.ndarray, path: str | Path) -> None:
    lines = [",".join(["date", *[f"z{j + 1}" for j in range(z.shape[1])]])]
    for m, row in zip(months, z):
        lines.append(",".join([month_label(m), *[repr(float(v)) for v in row]]))
    tc.atomic_write_text(path, "\n".join(lines) + "\n")
