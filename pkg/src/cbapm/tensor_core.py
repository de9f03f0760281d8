"""Small, deterministic neural-network toolkit used by the macro encoder and
the consensus-bottleneck model.

Everything is plain numpy with hand-derived gradients. Parameters live in flat
``dict[str, ndarray]`` containers so that optimizers, gradient clipping and
checkpointing can treat every network the same way.

Conventions
-----------
* Batches are row-major: ``X`` has shape ``(batch, in_features)``.
* A dense layer holds ``W`` with shape ``(out, in)`` and ``b`` with shape
  ``(out,)``; the forward map is ``X @ W.T + b``.
* Random numbers come from :func:`make_rng`, a Philox (counter-based) stream
  keyed by ``(seed, *stream_ids)``.
"""

from __future__ import annotations

import base64
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import erf

Params = dict[str, np.ndarray]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

CHECKPOINT_FORMAT = "cbapm-checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# randomness


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and an optional stream path.

    Distinct stream paths give statistically independent generators, so
    e.g. ``make_rng(seed, window, member)`` never collides with
    ``make_rng(seed, window, member + 1)``.
    """
    if seed < 0 or any(s < 0 for s in stream):
        raise ValueError("seed and stream ids must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


# ---------------------------------------------------------------------------
# activations


def normal_cdf(x: np.ndarray) -> np.ndarray:
    out = erf(np.asarray(x, dtype=float) / _SQRT2)
    out += 1.0
    out *= 0.5
    return out


def normal_pdf(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = x * x
    out *= -0.5
    np.exp(out, out=out)
    out *= _INV_SQRT_2PI
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` (no tanh approximation)."""
    x = np.asarray(x, dtype=float)
    return x * normal_cdf(x)


def gelu_backward(x: np.ndarray, upstream: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    """Chain rule through GELU; ``cdf`` may pass ``Phi(x)`` cached by the forward pass."""
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if x.shape != upstream.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {upstream.shape}")
    if cdf is None:
        cdf = normal_cdf(x)
    out = normal_pdf(x)
    out *= x
    out += cdf
    out *= upstream
    return out


# ---------------------------------------------------------------------------
# dense layers


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent layer shapes W{self.W.shape} b{self.b.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape  # type: ignore[return-value]


def he_init(rows: int, cols: int, rng: np.random.Generator) -> DenseLayer:
    """Weights ~ N(0, 2 / fan_in) with ``fan_in = cols``; zero bias."""
    if rows <= 0 or cols <= 0:
        raise ValueError("layer dimensions must be positive")
    W = rng.standard_normal((rows, cols)) * math.sqrt(2.0 / cols)
    return DenseLayer(W, np.zeros(rows))


def dense_forward(layer: DenseLayer, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != layer.W.shape[1]:
        raise ValueError(f"input shape {X.shape} does not match layer {layer.W.shape}")
    return X @ layer.W.T + layer.b


def dense_backward(
    layer: DenseLayer, X: np.ndarray, dY: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dW, db, dX)`` for ``Y = X @ W.T + b``."""
    X = np.asarray(X, dtype=float)
    dY = np.asarray(dY, dtype=float)
    if dY.shape != (X.shape[0], layer.W.shape[0]) or X.shape[1] != layer.W.shape[1]:
        raise ValueError(f"shape mismatch: X{X.shape} dY{dY.shape} W{layer.W.shape}")
    return dY.T @ X, dY.sum(axis=0), dY @ layer.W


# ---------------------------------------------------------------------------
# layer normalisation


LN_EPS = 1e-5


def layer_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Normalise each row to zero mean / unit variance, then scale and shift.

    Returns ``(y, cache)``; pass ``cache`` to :func:`layer_norm_backward`.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 2:
        raise ValueError("layer norm needs at least two features")
    mu = x.mean(axis=-1, keepdims=True)
    xhat = x - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std
    y = xhat * gamma
    y += beta
    return y, (xhat, inv_std, np.asarray(gamma, dtype=float))


def layer_norm_backward(
    dy: np.ndarray, cache: tuple[np.ndarray, np.ndarray, np.ndarray]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma = cache
    dy = np.asarray(dy, dtype=float)
    dgamma = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbeta = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * gamma
    n = xhat.shape[-1]
    dx = n * dxhat
    dx -= dxhat.sum(axis=-1, keepdims=True)
    dx -= xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    dx *= inv_std / n
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# dropout


def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``p``, else ``1 / (1 - p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if p == 0.0:
        return np.ones(shape)
    return np.where(rng.random(shape) >= p, 1.0 / (1.0 - p), 0.0)


def dropout(x: np.ndarray, p: float, rng: np.random.Generator | None, training: bool) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not training or p == 0.0:
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    return x * dropout_mask(x.shape, p, rng)


# ---------------------------------------------------------------------------
# multilayer perceptron


@dataclass(frozen=True)
class MlpSpec:
    """Feed-forward stack ``sizes[0] -> ... -> sizes[-1]``.

    Hidden layers are ``affine -> [layer norm] -> GELU -> [dropout]``; the
    final layer is affine only.
    """

    sizes: tuple[int, ...]
    layer_norm: bool = False
    dropout: float = 0.0
    prefix: str = ""

    def __post_init__(self) -> None:
        if len(self.sizes) < 2 or any(s <= 0 for s in self.sizes):
            raise ValueError(f"invalid layer sizes {self.sizes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def key(self, name: str, k: int) -> str:
        return f"{self.prefix}{name}{k}"

    def init(self, rng: np.random.Generator) -> Params:
        params: Params = {}
        for k in range(self.n_layers):
            layer = he_init(self.sizes[k + 1], self.sizes[k], rng)
            params[self.key("W", k)] = layer.W
            params[self.key("b", k)] = layer.b
            if self.layer_norm and k < self.n_layers - 1:
                params[self.key("ln_g", k)] = np.ones(self.sizes[k + 1])
                params[self.key("ln_b", k)] = np.zeros(self.sizes[k + 1])
        return params

    def forward(
        self,
        params: Params,
        X: np.ndarray,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, list[dict[str, Any]]]:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got shape {X.shape}")
        use_dropout = training and self.dropout > 0.0
        if use_dropout and rng is None:
            raise ValueError("training-mode dropout needs an rng")
        cache: list[dict[str, Any]] = []
        h = X
        for k in range(self.n_layers):
            layer = DenseLayer(params[self.key("W", k)], params[self.key("b", k)])
            entry: dict[str, Any] = {"x": h}
            a = dense_forward(layer, h)
            if k == self.n_layers - 1:
                cache.append(entry)
                h = a
                break
            if self.layer_norm:
                a, entry["ln"] = layer_norm(a, params[self.key("ln_g", k)], params[self.key("ln_b", k)])
            entry["pre"] = a
            entry["cdf"] = normal_cdf(a)
            h = a * entry["cdf"]
            if use_dropout:
                mask = dropout_mask(h.shape, self.dropout, rng)  # type: ignore[arg-type]
                entry["mask"] = mask
                h = h * mask
            cache.append(entry)
        return h, cache

    def backward(
        self, params: Params, cache: list[dict[str, Any]], d_out: np.ndarray
    ) -> tuple[Params, np.ndarray]:
        """Gradients of a scalar loss given ``d_out = dLoss/dOutput``."""
        grads: Params = {}
        g = np.asarray(d_out, dtype=float)
        for k in reversed(range(self.n_layers)):
            entry = cache[k]
            if k < self.n_layers - 1:
                if "mask" in entry:
                    g = g * entry["mask"]
                g = gelu_backward(entry["pre"], g, entry["cdf"])
                if "ln" in entry:
                    g, dg, db = layer_norm_backward(g, entry["ln"])
                    grads[self.key("ln_g", k)] = dg
                    grads[self.key("ln_b", k)] = db
            layer = DenseLayer(params[self.key("W", k)], params[self.key("b", k)])
            dW, db, g = dense_backward(layer, entry["x"], g)
            grads[self.key("W", k)] = dW
            grads[self.key("b", k)] = db
        return grads, g


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = True
    step_count: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


def adam_step(params: Params, grads: Params, state: AdamState) -> Params:
    """One Adam update with bias correction, applied in place.

    With ``state.decoupled`` (default) weight decay is applied as
    ``p <- p - lr * wd * p`` before the moment update (AdamW); otherwise
    ``wd * p`` is added to the gradient (L2 penalty folded into the loss).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if state.weight_decay:
            if state.decoupled:
                p -= state.lr * state.weight_decay * p
            else:
                g = g + state.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Params, max_norm: float = 1.0, mode: str = "norm") -> Params:
    """Clip by global L2 norm (default) or clamp each element (``mode="value"``)."""
    if mode == "value":
        return {k: np.clip(g, -max_norm, max_norm) for k, g in grads.items()}
    if mode != "norm":
        raise ValueError(f"unknown clipping mode {mode!r}")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return dict(grads)


@dataclass
class TrainControl:
    """Plateau scheduler and early-stopping bookkeeping.

    The scheduler and the early stopper track improvements independently;
    "improvement" means strictly below the best value seen so far.
    """

    scheduler_patience: int = 2
    scheduler_factor: float = 0.2
    early_stop_patience: int = 5
    grad_clip: float = 1.0
    dropout_p: float = 0.5
    best_val: float = math.inf
    epochs_since_improve: int = 0
    sched_best: float = math.inf
    sched_bad_epochs: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ValueError("scheduler factor must lie in (0, 1)")
        if self.scheduler_patience < 0 or self.early_stop_patience < 0:
            raise ValueError("patience must be non-negative")


def lr_on_plateau(control: TrainControl, val_loss: float) -> bool:
    """Return True when the learning rate should be multiplied by the factor."""
    if not math.isfinite(val_loss):
        raise ValueError("validation loss must be finite")
    if val_loss < control.sched_best:
        control.sched_best = val_loss
        control.sched_bad_epochs = 0
        return False
    control.sched_bad_epochs += 1
    if control.sched_bad_epochs >= control.scheduler_patience:
        control.sched_bad_epochs = 0
        return True
    return False


def early_stop(control: TrainControl, val_loss: float) -> bool:
    if not math.isfinite(val_loss):
        raise ValueError("validation loss must be finite")
    if val_loss < control.best_val:
        control.best_val = val_loss
        control.epochs_since_improve = 0
        return False
    control.epochs_since_improve += 1
    return control.epochs_since_improve >= control.early_stop_patience


# ---------------------------------------------------------------------------
# checkpoints


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def _encode_array(a: np.ndarray) -> dict[str, Any]:
    data = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode_array(obj: dict[str, Any]) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(float)


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(
    path: str | Path,
    params: Params,
    *,
    seed: int,
    control: TrainControl | None = None,
    meta: dict[str, Any] | None = None,
) -> None:
    """JSON checkpoint; arrays are base64 of little-endian float64 bytes."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "control": _jsonable_control(control),
        "meta": meta or {},
        "params": {k: _encode_array(params[k]) for k in sorted(params)},
    }
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True))


def _jsonable_control(control: TrainControl | None) -> dict[str, Any] | None:
    if control is None:
        return None
    out = asdict(control)
    for k, v in out.items():
        if isinstance(v, float) and not math.isfinite(v):
            out[k] = None
    return out


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a cbapm checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    doc["params"] = {k: _decode_array(v) for k, v in doc["params"].items()}
    if doc.get("control") is not None:
        ctl = {k: (math.inf if v is None else v) for k, v in doc["control"].items()}
        doc["control"] = TrainControl(**ctl)
    return doc
