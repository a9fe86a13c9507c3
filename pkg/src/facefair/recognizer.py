"""Two-layer embedding encoder trained with margin-adjusted softmax losses.

Forward pass: ``f = W2 relu(W1 x + b1) + b2``; ``u = f / ||f||``; cosine to
each unit prototype column ``P[:, j]``. The target logit receives the margin
of the selected variant, the others are ``s * cos``. Gradients are written
out by hand.

Quality ``q = clamp(||f|| / q_ref, 0, 1)`` feeds the quality-adaptive margin
``m_q = m0 - lambda_m * (1 - q)``. As in the usual quality-adaptive recipe,
``q`` is treated as a constant in the backward pass.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

VARIANTS = ("arcface", "cosface", "adaface")
_PARAM_NAMES = ("W1", "b1", "W2", "b2", "P")
_COS_CLIP = 1.0 - 1e-7


class NumericalError(FloatingPointError):
    pass


class TrainingError(RuntimeError):
    pass


class SentinelWarning(UserWarning):
    """A zero-norm embedding was scored."""


@dataclass(frozen=True)
class MarginConfig:
    variant: str = "cosface"
    s: float = 64.0
    m: float | None = None
    m0: float = 0.4
    lambda_m: float = 0.3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.s > 0:
            raise ValueError("s must be positive")
        if self.m is not None and self.m < 0:
            raise ValueError("margin m must be nonnegative")
        if self.m0 < 0 or self.lambda_m < 0:
            raise ValueError("m0 and lambda_m must be nonnegative")
        if self.m0 - self.lambda_m < 0:
            raise ValueError("m0 - lambda_m must be nonnegative so m_q stays >= 0")
        if self.m is None:  # per-variant default, fixed at construction so equality survives JSON
            object.__setattr__(self, "m", 0.5 if self.variant == "arcface" else 0.35)

    @property
    def margin(self) -> float:
        return self.m

    def to_dict(self) -> dict:
        return asdict(self)

    def scaled(self, factor: float) -> "MarginConfig":
        """The same loss with every margin term multiplied by ``factor`` (used for warm-up)."""
        if factor >= 1.0:
            return self
        return replace(self, m=factor * self.margin, m0=factor * self.m0,
                       lambda_m=factor * self.lambda_m)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    hidden: int = 64
    embedding_dim: int = 32
    augment: bool = True
    crop_jitter: int = 0
    brightness: float = 0.2
    quality_percentile: float = 95.0
    margin_warmup_epochs: int = 0
    standardize_inputs: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.margin_warmup_epochs < 0:
            raise ValueError("margin_warmup_epochs must be nonnegative")

    def margin_factor(self, epoch: int) -> float:
        """Margin multiplier for 0-based ``epoch``: linear ramp from 0, then 1."""
        if epoch >= self.margin_warmup_epochs:
            return 1.0
        return epoch / self.margin_warmup_epochs


@dataclass
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    P: np.ndarray
    q_ref: float = 1.0
    input_center: np.ndarray | float = 0.0
    input_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.P.shape[1]

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in _PARAM_NAMES}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.arrays().items()},
                             q_ref=self.q_ref, input_center=self.input_center,
                             input_scale=self.input_scale, meta=dict(self.meta))

    def normalize_prototypes(self) -> None:
        norms = np.linalg.norm(self.P, axis=0, keepdims=True)
        self.P /= np.where(norms > 0, norms, 1.0)


def init_params(input_dim: int, n_classes: int, hidden: int = 64, embedding_dim: int = 32,
                rng: np.random.Generator | None = None) -> EncoderParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    p = EncoderParams(
        W1=rng.standard_normal((hidden, input_dim)) * math.sqrt(2.0 / input_dim),
        b1=np.zeros(hidden),
        W2=rng.standard_normal((embedding_dim, hidden)) * math.sqrt(1.0 / hidden),
        b2=np.zeros(embedding_dim),
        P=rng.standard_normal((embedding_dim, n_classes)),
    )
    p.normalize_prototypes()
    return p


@dataclass
class Embedding:
    f: np.ndarray
    q: float
    u: np.ndarray | None

    @property
    def is_sentinel(self) -> bool:
        return self.u is None


def _prepare(params: EncoderParams, X: np.ndarray) -> np.ndarray:
    if np.isscalar(params.input_center) and params.input_center == 0.0 and params.input_scale == 1.0:
        return X
    return (X - params.input_center) / params.input_scale


def _features(params: EncoderParams, X: np.ndarray):
    z1 = _prepare(params, X) @ params.W1.T + params.b1
    h = np.maximum(z1, 0.0)
    f = h @ params.W2.T + params.b2
    return z1, h, f


def quality(norm, q_ref: float):
    if q_ref <= 0:
        return np.zeros_like(np.asarray(norm, dtype=float))
    return np.clip(np.asarray(norm) / q_ref, 0.0, 1.0)


def embed_batch(params: EncoderParams, X: np.ndarray):
    """Return (f, q, u) arrays for a batch; zero-norm rows get u = 0."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ValueError(f"expected inputs of width {params.input_dim}, got shape {X.shape}")
    _, _, f = _features(params, X)
    norm = np.linalg.norm(f, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    u = np.where(norm[:, None] > 0, f / safe[:, None], 0.0)
    return f, quality(norm, params.q_ref), u


def encode(params: EncoderParams, obs) -> Embedding:
    """Embed one observation. A zero feature vector yields the sentinel (u=None)."""
    x = np.asarray(obs.pixels, dtype=float).ravel()
    if x.size != params.input_dim:
        raise ValueError(f"observation has {x.size} pixels, encoder expects {params.input_dim}")
    f, q, u = embed_batch(params, x[None, :])
    if not np.any(f[0]):
        return Embedding(f[0], 0.0, None)
    return Embedding(f[0], float(q[0]), u[0])


def cosine_score(e1: Embedding, e2: Embedding) -> float:
    if e1.is_sentinel or e2.is_sentinel:
        warnings.warn("sentinel embedding scored as 0", SentinelWarning, stacklevel=2)
        return 0.0
    return float(np.clip(e1.u @ e2.u, -1.0, 1.0))


# --------------------------------------------------------------------------
# Margins


def margin_logit(cfg: MarginConfig, cos_target, q=1.0):
    """Margin-adjusted target logit; vectorized over ``cos_target`` and ``q``."""
    c = np.asarray(cos_target, dtype=float)
    if cfg.variant == "cosface":
        out = cfg.s * (c - cfg.margin)
    elif cfg.variant == "adaface":
        out = cfg.s * (c - adaptive_margin(cfg, q))
    else:
        # Past theta + m = pi the angular form turns back up; continue it with
        # the linear extension cos - m*sin(m) so the logit stays monotone.
        m = cfg.margin
        cc = np.clip(c, -1.0, 1.0)
        theta = np.arccos(cc)
        out = cfg.s * np.where(theta + m <= math.pi, np.cos(theta + m), cc - m * math.sin(m))
    return float(out) if out.ndim == 0 else out


def adaptive_margin(cfg: MarginConfig, q):
    return cfg.m0 - cfg.lambda_m * (1.0 - np.asarray(q, dtype=float))


def _margin_slope(cfg: MarginConfig, c: np.ndarray) -> np.ndarray:
    """d(target logit)/d(cos), before the scale s."""
    if cfg.variant != "arcface":
        return np.ones_like(c)
    m = cfg.margin
    cc = np.clip(c, -_COS_CLIP, _COS_CLIP)
    slope = math.cos(m) + math.sin(m) * cc / np.sqrt(1.0 - cc * cc)
    return np.where(np.arccos(cc) + m <= math.pi, slope, 1.0)


# --------------------------------------------------------------------------
# Loss


def loss_and_grads(params: EncoderParams, X: np.ndarray, y: np.ndarray, cfg: MarginConfig,
                   q: np.ndarray | None = None):
    """Mean margin cross-entropy over a batch and its parameter gradients.

    ``q`` overrides the per-sample quality (it is otherwise computed from the
    current features and held constant for differentiation).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= params.n_classes:
        raise ValueError("labels outside the class range")

    z1, h, f = _features(params, X)
    norm = np.linalg.norm(f, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    u = f / safe[:, None]
    if q is None:
        q = quality(norm, params.q_ref)
    q = np.broadcast_to(np.asarray(q, dtype=float), (n,))

    cos = u @ params.P
    rows = np.arange(n)
    logits = cfg.s * cos
    ct = cos[rows, y]
    logits[rows, y] = margin_logit(cfg, ct, q)

    shift = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - shift)
    z = ex.sum(axis=1, keepdims=True)
    per_sample = (np.log(z[:, 0]) + shift[:, 0]) - logits[rows, y]
    if not np.all(np.isfinite(per_sample)):
        bad = int(np.flatnonzero(~np.isfinite(per_sample))[0])
        raise NumericalError(f"non-finite loss at sample {bad}")
    loss = float(per_sample.mean())

    dlogits = ex / z
    dlogits[rows, y] -= 1.0
    dlogits /= n
    dcos = cfg.s * dlogits
    dcos[rows, y] *= _margin_slope(cfg, ct)

    g_P = u.T @ dcos
    du = dcos @ params.P.T
    # d u / d f = (I - u u^T) / ||f||
    df = (du - u * np.sum(du * u, axis=1, keepdims=True)) / safe[:, None]
    df[norm == 0] = 0.0
    g_W2 = df.T @ h
    g_b2 = df.sum(axis=0)
    dz1 = (df @ params.W2) * (z1 > 0)
    g_W1 = dz1.T @ _prepare(params, X)
    g_b1 = dz1.sum(axis=0)
    return loss, {"W1": g_W1, "b1": g_b1, "W2": g_W2, "b2": g_b2, "P": g_P}


def batch_loss(params: EncoderParams, X, y, cfg: MarginConfig, q=None) -> float:
    return loss_and_grads(params, X, y, cfg, q)[0]


# --------------------------------------------------------------------------
# Training


def cosine_lr(base_lr: float, epoch: int, epochs: int) -> float:
    return base_lr * (1.0 + math.cos(math.pi * epoch / epochs)) / 2.0


def augment(X: np.ndarray, shape: tuple[int, int], rng: np.random.Generator,
            jitter: int = 2, brightness: float = 0.2) -> np.ndarray:
    """Horizontal flip, zero-padded shift of up to ``jitter`` pixels, brightness scaling."""
    h, w = shape
    imgs = X.reshape(-1, h, w).copy()
    n = imgs.shape[0]
    flip = rng.random(n) < 0.5
    imgs[flip] = imgs[flip, :, ::-1]
    if jitter > 0:
        padded = np.pad(imgs, ((0, 0), (jitter, jitter), (jitter, jitter)))
        offs = rng.integers(0, 2 * jitter + 1, size=(n, 2))
        for i in range(n):
            dy, dx = offs[i]
            imgs[i] = padded[i, dy:dy + h, dx:dx + w]
    scale = 1.0 + brightness * (2.0 * rng.random(n) - 1.0)
    imgs *= scale[:, None, None]
    return np.clip(imgs, 0.0, 1.0).reshape(n, h * w)


def feature_norm_percentile(params: EncoderParams, X: np.ndarray, pct: float) -> float:
    _, _, f = _features(params, X)
    return float(np.percentile(np.linalg.norm(f, axis=1), pct))


@dataclass
class TrainResult:
    params: EncoderParams
    loss_log: list  # (epoch, lr, mean loss); epoch 0 is the pre-training loss
    class_ids: list


def train(observations: Sequence, margin_cfg: MarginConfig, train_cfg: TrainConfig = TrainConfig(),
          init: EncoderParams | None = None) -> TrainResult:
    """Train an encoder on a cohort, one class per identity.

    SGD with momentum and a per-epoch cosine-annealed rate. ``q_ref`` is the
    95th percentile of ``||f||`` on the un-augmented training set, taken from
    the initial weights for epoch 1 and refreshed once after epoch 1.
    """
    ids = sorted({o.identity_id for o in observations})
    if len(ids) < 2:
        raise ValueError("training needs at least two identities")
    index = {iid: k for k, iid in enumerate(ids)}
    X = np.stack([np.asarray(o.pixels, dtype=float).ravel() for o in observations])
    y = np.array([index[o.identity_id] for o in observations])
    shape = observations[0].pixels.shape

    rng = np.random.default_rng([train_cfg.seed, 0x7EA1])
    if init is not None:
        params = init.copy()
    else:
        params = init_params(X.shape[1], len(ids), train_cfg.hidden, train_cfg.embedding_dim, rng)
        if train_cfg.standardize_inputs:
            # Remove the mean face and rescale; raw pixels share a large common component.
            params.input_center = X.mean(axis=0)
            scale = float(X.std())
            params.input_scale = scale if scale > 0 else 1.0
    params.q_ref = feature_norm_percentile(params, X, train_cfg.quality_percentile)
    velocity = {k: np.zeros_like(v) for k, v in params.arrays().items()}

    loss_log = [(0, 0.0, batch_loss(params, X, y, margin_cfg))]
    n = X.shape[0]
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(train_cfg.lr, epoch, train_cfg.epochs)
        epoch_margin = margin_cfg.scaled(train_cfg.margin_factor(epoch))
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            xb = X[idx]
            if train_cfg.augment:
                xb = augment(xb, shape, rng, train_cfg.crop_jitter, train_cfg.brightness)
            loss, grads = loss_and_grads(params, xb, y[idx], epoch_margin)
            if loss > 1e6:
                raise TrainingError(f"training diverged at epoch {epoch + 1} (loss {loss:.3g})")
            total += loss * idx.size
            if lr > 0:
                for k, g in grads.items():
                    if train_cfg.weight_decay and k in ("W1", "W2"):
                        g = g + train_cfg.weight_decay * getattr(params, k)
                    velocity[k] = train_cfg.momentum * velocity[k] + g
                    getattr(params, k)[...] -= lr * velocity[k]
                params.normalize_prototypes()
        loss_log.append((epoch + 1, lr, total / n))
        log.debug("epoch %d lr %.6f loss %.4f", epoch + 1, lr, total / n)
        if epoch == 0:
            params.q_ref = feature_norm_percentile(params, X, train_cfg.quality_percentile)

    params.meta = {"margin": margin_cfg.to_dict(), "train": asdict(train_cfg),
                   "input_shape": list(shape), "n_classes": len(ids)}
    return TrainResult(params, loss_log, ids)


# --------------------------------------------------------------------------
# Serialization


def save_params(path, params: EncoderParams) -> None:
    """Write a 4-byte header length, a JSON header, then little-endian float32 data.

    The per-pixel input centre is stored as an extra trailing block when it
    is an array; a scalar centre lives in the header.
    """
    arrays = dict(params.arrays())
    header = {"format": "facefair-params/1", "q_ref": params.q_ref, "meta": params.meta,
              "input_scale": float(params.input_scale)}
    if np.ndim(params.input_center) == 0:
        header["input_center"] = float(params.input_center)
    else:
        arrays["input_center"] = np.asarray(params.input_center)
    header["layers"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode()
    data = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in arrays.values())
    Path(path).write_bytes(struct.pack("<I", len(blob)) + blob + data)


def load_params(path) -> EncoderParams:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated parameter file")
    (hlen,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4:4 + hlen])
    flat = np.frombuffer(raw[4 + hlen:], dtype="<f4").astype(np.float64)
    arrays, pos = {}, 0
    for layer in header["layers"]:
        size = int(np.prod(layer["shape"]))
        if pos + size > flat.size:
            raise ValueError(f"{path}: data ends inside layer {layer['name']!r}")
        arrays[layer["name"]] = flat[pos:pos + size].reshape(layer["shape"]).copy()
        pos += size
    if pos != flat.size:
        raise ValueError(f"{path}: {flat.size - pos} trailing values")
    center = arrays.pop("input_center", header.get("input_center", 0.0))
    return EncoderParams(**arrays, q_ref=header["q_ref"], input_center=center,
                         input_scale=header.get("input_scale", 1.0), meta=header["meta"])


def write_loss_log(path, loss_log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "loss"])
        for epoch, lr, loss in loss_log:
            w.writerow([epoch, repr(float(lr)), repr(float(loss))])
