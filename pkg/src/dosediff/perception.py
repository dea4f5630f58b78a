"""Dose and anatomy perception: a small CNN encoder with two embedding heads.

The dose head's embedding is scored against two learnable anchor vectors
("clean" and "noisy"); the score is the two-way softmax of the inner
products. Training combines the dose MSE, a rank-contrastive loss over the
dose labels and a supervised-contrastive loss over anatomy labels.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import fileio
from .metrics import plcc, srocc
from .numcore import SGD, Conv3x3, Linear, Module, NonFiniteError, Rng, Tensor, backward, no_grad, ops, parameter
from .numcore.nn import clip_grad_norm, cosine_lr
from .validation import check_dose_labels, check_images

log = logging.getLogger(__name__)

ENCODER_WIDTHS = (16, 32, 64, 128)
# fixed input standardisation: windowed soft tissue sits near 1/3
INPUT_SHIFT = 0.3
INPUT_GAIN = 5.0
# the second input channel is a 3x3 high-pass residual, where dose noise lives
HIGHPASS_GAIN = 40.0
# uniform bound giving variance 2 / fan_in
HE_GAIN = math.sqrt(6.0)


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass
class PerceptionConfig:
    d_e: int = 32
    tau: float = 0.1
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-2
    lr_min: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-9
    crop_fraction: float = 0.75
    clip_norm: float = 5.0
    dtype: str = "float32"


@dataclass
class PerceptionOutput:
    e_d: np.ndarray
    e_a: np.ndarray
    y_hat: np.ndarray


class PerceptionModel(Module):
    def __init__(self, d_e: int = 32, rng: Rng | None = None, dtype=np.float64):
        rng = rng or Rng(0)
        self.d_e = d_e
        chans = (2, *ENCODER_WIDTHS)
        self.encoder = [Conv3x3(chans[i], chans[i + 1], rng, stride=2, gain=HE_GAIN) for i in range(len(ENCODER_WIDTHS))]
        width = ENCODER_WIDTHS[-1]
        self.dose_head = [Linear(width, 64, rng, gain=HE_GAIN), Linear(64, d_e, rng)]
        self.anatomy_head = [Linear(width, 64, rng, gain=HE_GAIN), Linear(64, d_e, rng)]
        anchors = rng.normal(size=(2, d_e))
        anchors *= 2.0 / np.linalg.norm(anchors, axis=1, keepdims=True)
        self.e_clean = parameter(anchors[0])
        self.e_noisy = parameter(anchors[1])
        self.astype(dtype)

    @property
    def dtype(self):
        return self.e_clean.dtype

    def features(self, images: Tensor) -> Tensor:
        h = images
        for i, conv in enumerate(self.encoder):
            try:
                h = ops.silu(conv(h))
            except NonFiniteError as exc:
                raise NonFiniteError(f"encoder layer {i}: {exc}") from exc
        return ops.mean(h, axis=(2, 3))

    def __call__(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return (e_d, e_a, y_hat) for an N x 1 x H x W batch."""
        f = self.features(images)
        e_d = ops.l2_normalize(self.dose_head[1](ops.silu(self.dose_head[0](f))))
        e_a = ops.l2_normalize(self.anatomy_head[1](ops.silu(self.anatomy_head[0](f))))
        return e_d, e_a, dose_score(e_d, self.e_clean, self.e_noisy)


def _prep(images: np.ndarray, dtype) -> Tensor:
    x = np.asarray(images, dtype=np.float64)
    hp = x - uniform_filter(x, size=(1, 3, 3), mode="reflect")
    stacked = np.stack([(x - INPUT_SHIFT) * INPUT_GAIN, hp * HIGHPASS_GAIN], axis=1)
    return Tensor(stacked.astype(dtype))


# ------------------------------------------------------------------ scores and losses


def dose_score(e_d: Tensor, e_clean: Tensor, e_noisy: Tensor) -> Tensor:
    """exp(e.c) / (exp(e.c) + exp(e.n)) per row of ``e_d``."""
    if e_d.shape[-1] != e_clean.shape[0] or e_clean.shape != e_noisy.shape:
        raise ValueError(f"dimension mismatch {e_d.shape}, {e_clean.shape}, {e_noisy.shape}")
    squeeze = e_d.ndim == 1
    if squeeze:
        e_d = ops.reshape(e_d, (1, -1))
    d = e_clean.shape[0]
    anchors = ops.concat([ops.reshape(e_clean, (d, 1)), ops.reshape(e_noisy, (d, 1))], axis=1)
    probs = ops.softmax(ops.matmul(e_d, anchors))
    y = ops.reshape(ops.gather(probs, [0], axis=1), (-1,))
    return ops.reshape(y, ()) if squeeze else y


def loss_dose(y_hat: Tensor, y: Sequence[float]) -> Tensor:
    y = np.asarray(y, dtype=y_hat.dtype).reshape(y_hat.shape)
    diff = ops.sub(y_hat, Tensor(y))
    return ops.mean(ops.mul(diff, diff))


def rank_sets(y: Sequence[float]) -> np.ndarray:
    """Boolean mask M[i, j, k]: k is in S_{i,j} (k != i, |y_i-y_k| >= |y_i-y_j|)."""
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    dist = np.abs(y[:, None] - y[None, :])
    mask = dist[:, None, :] >= dist[:, :, None]
    mask &= ~np.eye(n, dtype=bool)[:, None, :]
    return mask


def _shifted_logits(e: Tensor, tau: float) -> Tensor:
    z = ops.scale(ops.matmul(e, ops.transpose(e)), 1.0 / tau)
    # detached row max keeps exp() bounded; log-ratios are unchanged
    off = np.where(np.eye(e.shape[0], dtype=bool), -np.inf, z.data)
    shift = off.max(axis=1, keepdims=True)
    return ops.sub(z, Tensor(np.broadcast_to(shift, z.shape).astype(z.dtype)))


def loss_rank(e: Tensor, y: Sequence[float], tau: float) -> Tensor:
    """Rank-contrastive loss averaged over the 2N(2N-1) ordered pairs."""
    n = e.shape[0]
    if n < 2 or tau <= 0:
        raise ValueError("need at least 2 embeddings and tau > 0")
    y = np.asarray(y, dtype=np.float64)
    if y.size != n:
        raise ValueError(f"{n} embeddings but {y.size} labels")
    z = _shifted_logits(e, tau)
    mask = Tensor(rank_sets(y).astype(e.dtype))
    expz = ops.exp(z)
    tiled = ops.expand(ops.reshape(expz, (n, 1, n)), (n, n, n))
    denom = ops.sum(ops.mul(tiled, mask), axis=2)
    offdiag = Tensor((~np.eye(n, dtype=bool)).astype(e.dtype))
    # guard the diagonal (never used) against log(0)
    denom = ops.add(denom, Tensor(np.eye(n, dtype=e.dtype)))
    terms = ops.mul(ops.sub(ops.log(denom), z), offdiag)
    return ops.scale(ops.sum(terms), 1.0 / (n * (n - 1)))


def loss_anatomy(e: Tensor, labels: Sequence, tau: float) -> Tensor:
    """Supervised-contrastive loss, summed over anchors; self is excluded."""
    n = e.shape[0]
    if tau <= 0:
        raise ValueError("tau must be positive")
    labels = np.asarray(labels)
    if labels.size != n:
        raise ValueError(f"{n} embeddings but {labels.size} labels")
    pos = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    counts = pos.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError(f"samples {np.flatnonzero(counts == 0).tolist()} have no positive in the batch")
    z = _shifted_logits(e, tau)
    notself = Tensor((~np.eye(n, dtype=bool)).astype(e.dtype))
    denom = ops.sum(ops.mul(ops.exp(z), notself), axis=1, keepdims=True)
    logprob = ops.sub(z, ops.expand(ops.log(denom), (n, n)))
    weights = Tensor((pos / counts[:, None]).astype(e.dtype))
    return ops.scale(ops.sum(ops.mul(logprob, weights)), -1.0)


def loss_total(e_d: Tensor, e_a: Tensor, y_hat: Tensor, y_d, anatomy, tau: float) -> Tensor:
    return ops.add(ops.add(loss_dose(y_hat, y_d), loss_rank(e_d, y_d, tau)), loss_anatomy(e_a, anatomy, tau))


# ------------------------------------------------------------------ training / inference


def _augment(img: np.ndarray, rng: Rng) -> np.ndarray:
    img = np.rot90(img, int(rng.integers(0, 4)))
    if rng.uniform() < 0.5:
        img = img[:, ::-1]
    return img


def two_view_batch(images: np.ndarray, crop_fraction: float, rng: Rng) -> np.ndarray:
    """Two independent random crops (``crop_fraction`` of the area) per image.

    Output rows are ordered view-major: [view0 of all images, view1 of all].
    """
    n, h, w = images.shape
    ch = max(16, int(round(h * math.sqrt(crop_fraction))))
    cw = max(16, int(round(w * math.sqrt(crop_fraction))))
    out = np.empty((2 * n, ch, cw))
    for v in range(2):
        for i in range(n):
            r = int(rng.integers(0, h - ch + 1))
            c = int(rng.integers(0, w - cw + 1))
            out[v * n + i] = _augment(images[i, r : r + ch, c : c + cw], rng)
    return out


def train_perception(config: PerceptionConfig, images, y_d, anatomy, rng: Rng,
                     model: PerceptionModel | None = None,
                     callback: Callable[[int, float], None] | None = None) -> tuple[PerceptionModel, list[float]]:
    """Fit the encoder, heads and anchors; returns the model and per-epoch mean loss.

    ``callback(step, loss)`` is called after every optimizer step.
    """
    images = check_images(images)
    y_d = check_dose_labels(y_d, images.shape[0])
    anatomy = np.asarray(anatomy)
    if np.unique(y_d).size < 2 or np.unique(anatomy).size < 2:
        raise ValueError("training data must cover at least 2 dose fractions and 2 anatomies")
    dtype = np.dtype(config.dtype)
    model = model or PerceptionModel(config.d_e, rng.substream(0), dtype=dtype)
    params = model.parameters()
    opt = SGD(params, config.lr, config.momentum, config.weight_decay)
    n = images.shape[0]
    bs = min(config.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    total = config.epochs * steps_per_epoch
    trace = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.substream(1, epoch).permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            views = two_view_batch(images[idx], config.crop_fraction, rng.substream(2, step))
            yy = np.concatenate([y_d[idx], y_d[idx]])
            aa = np.concatenate([anatomy[idx], anatomy[idx]])
            opt.lr = cosine_lr(step, total, config.lr, config.lr_min)
            model.zero_grad()
            try:
                e_d, e_a, y_hat = model(_prep(views, dtype))
                loss = loss_total(e_d, e_a, y_hat, yy, aa, config.tau)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}: {exc}", step) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss diverged at epoch {epoch}", step)
            backward(loss)
            clip_grad_norm(params, config.clip_norm)
            opt.step()
            losses.append(value)
            if callback is not None:
                callback(step, value)
            step += 1
        trace.append(float(np.mean(losses)))
        log.info("perception epoch %d loss %.4f", epoch, trace[-1])
    return model, trace


def encode(model: PerceptionModel, images, batch_size: int = 64) -> PerceptionOutput:
    images = check_images(images)
    parts = []
    with no_grad():
        for s in range(0, images.shape[0], batch_size):
            e_d, e_a, y = model(_prep(images[s : s + batch_size], model.dtype))
            parts.append((e_d.data, e_a.data, y.data))
    return PerceptionOutput(*(np.concatenate([p[i] for p in parts]).astype(np.float64) for i in range(3)))


def class_centroids(e_a: np.ndarray, labels) -> dict:
    labels = np.asarray(labels)
    return {c: e_a[labels == c].mean(axis=0) for c in np.unique(labels)}


def nearest_centroid(e_a: np.ndarray, centroids: dict) -> np.ndarray:
    names = list(centroids)
    mat = np.stack([centroids[c] for c in names])
    d2 = ((e_a[:, None, :] - mat[None]) ** 2).sum(axis=2)
    return np.asarray(names)[np.argmin(d2, axis=1)]


def eval_perception(model: PerceptionModel, images, y_d, anatomy, centroids: dict | None = None) -> dict:
    """PLCC/SROCC of the dose score and nearest-centroid anatomy accuracy.

    Centroids default to those of the evaluated set itself.
    """
    out = encode(model, images)
    anatomy = np.asarray(anatomy)
    if centroids is None:
        centroids = class_centroids(out.e_a, anatomy)
    acc = float(np.mean(nearest_centroid(out.e_a, centroids) == anatomy))
    return {"plcc": plcc(out.y_hat, y_d), "srocc": srocc(out.y_hat, y_d), "anatomy_acc": acc}


def save_perception(path, model: PerceptionModel, extra: dict[str, np.ndarray] | None = None) -> None:
    params = model.state_dict()
    params["meta.d_e"] = np.array([model.d_e], dtype=np.float32)
    for k, v in (extra or {}).items():
        params[k] = v
    fileio.save_checkpoint(path, fileio.PERCEPTION_MAGIC, params)


def load_perception(path, dtype=np.float64) -> tuple[PerceptionModel, dict[str, np.ndarray]]:
    state = fileio.load_checkpoint(path, fileio.PERCEPTION_MAGIC)
    d_e = int(state.pop("meta.d_e")[0])
    extra = {k: state.pop(k) for k in list(state) if k.startswith(("centroid.", "opt."))}
    model = PerceptionModel(d_e, Rng(0), dtype=dtype)
    model.load_state_dict(state)
    return model, extra


def export_embeddings_csv(path, out: PerceptionOutput, y_d, anatomy, ids=None) -> None:
    n = out.e_d.shape[0]
    ids = ids if ids is not None else [str(i) for i in range(n)]
    d = out.e_d.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "y_d", "anatomy"] + [f"e_d{i}" for i in range(d)] + [f"e_a{i}" for i in range(d)])
        for i in range(n):
            w.writerow([ids[i], repr(float(y_d[i])), anatomy[i]] + [repr(float(v)) for v in out.e_d[i]]
                       + [repr(float(v)) for v in out.e_a[i]])


class DosePerception(TransformerMixin, BaseEstimator):
    """Estimator wrapper around the perception model.

    ``fit(X, y, anatomy=...)`` takes (n, H, W) images in [0, 1], dose
    fractions ``y`` and anatomy labels. ``predict`` returns the dose score,
    ``transform`` the concatenated [e_d, e_a] embeddings.
    """

    def __init__(self, d_e=32, tau=0.1, epochs=30, batch_size=16, lr=1e-2, lr_min=1e-5, momentum=0.9,
                 weight_decay=1e-9, crop_fraction=0.75, clip_norm=5.0, dtype="float32", random_state=0):
        self.d_e = d_e
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_min = lr_min
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.crop_fraction = crop_fraction
        self.clip_norm = clip_norm
        self.dtype = dtype
        self.random_state = random_state

    def _config(self) -> PerceptionConfig:
        names = {f for f in PerceptionConfig.__dataclass_fields__}
        return PerceptionConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y, anatomy=None):
        X = check_images(X)
        if anatomy is None:
            raise ValueError("anatomy labels are required")
        self.model_, self.loss_trace_ = train_perception(self._config(), X, y, anatomy, Rng(self.random_state))
        out = encode(self.model_, X)
        self.centroids_ = class_centroids(out.e_a, anatomy)
        self.classes_ = np.array(sorted(self.centroids_))
        return self

    @classmethod
    def from_model(cls, model: PerceptionModel, centroids: dict | None = None) -> "DosePerception":
        est = cls(d_e=model.d_e)
        est.model_ = model
        est.loss_trace_ = []
        est.centroids_ = centroids or {}
        est.classes_ = np.array(sorted(est.centroids_))
        return est

    def embed(self, X) -> PerceptionOutput:
        check_is_fitted(self, "model_")
        return encode(self.model_, X)

    def predict(self, X) -> np.ndarray:
        return self.embed(X).y_hat

    def transform(self, X) -> np.ndarray:
        out = self.embed(X)
        return np.hstack([out.e_d, out.e_a])

    def predict_anatomy(self, X) -> np.ndarray:
        return nearest_centroid(self.embed(X).e_a, self.centroids_)

    def score(self, X, y) -> float:
        return srocc(self.predict(X), y)
