"""Residual diffusion: schedule, forward marginal, training objective and few-step sampler.

The forward marginal moves from the normal-dose image toward the low-dose
one while adding Gaussian noise,

    I_t = I_nd + abar_t * I_res + bbar_t * eps,    I_res = I_ld - I_nd,

with abar_t = t / T and bbar_t = eta * abar_t. The network predicts I_res
from (I_t, t, I_ld); sampling walks a short decreasing timestep plan with a
deterministic implicit update.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .dadiff import DenoiserConfig, DenoiserNet
from .metrics import psnr
from .numcore import Adam, NonFiniteError, Rng, Tensor, backward, no_grad, ops
from .numcore.nn import clip_grad_norm, cosine_lr
from .perception import DivergenceError, PerceptionModel, encode
from .validation import check_images, check_pair

log = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    eta: float
    alpha_bar: np.ndarray
    beta_bar: np.ndarray

    @property
    def beta_sq(self) -> np.ndarray:
        """Per-step noise variances bbar_t^2 - bbar_{t-1}^2 for t = 1..T."""
        return np.diff(self.beta_bar**2)


def build_schedule(T: int = 100, eta: float = 0.2) -> DiffusionSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not eta >= 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    T = int(T)
    alpha_bar = np.arange(T + 1, dtype=np.float64) / T
    return DiffusionSchedule(T, float(eta), alpha_bar, eta * alpha_bar)


def _coef(values: np.ndarray, t, like: np.ndarray) -> np.ndarray:
    """Schedule values at ``t`` shaped to broadcast over a batch of images."""
    c = values[np.asarray(t)]
    return np.reshape(c, np.shape(c) + (1,) * (like.ndim - np.ndim(c)))


def forward_sample(i_nd, i_res, t, eps, sched: DiffusionSchedule) -> np.ndarray:
    i_nd, i_res, eps = (np.asarray(a, dtype=np.float64) for a in (i_nd, i_res, eps))
    if not (i_nd.shape == i_res.shape == eps.shape):
        raise ValueError(f"shape mismatch {i_nd.shape}, {i_res.shape}, {eps.shape}")
    return i_nd + _coef(sched.alpha_bar, t, i_nd) * i_res + _coef(sched.beta_bar, t, i_nd) * eps


def forward_step(i_prev, i_res, t, eps, sched: DiffusionSchedule) -> np.ndarray:
    """One-step kernel I_t = I_{t-1} + (abar_t - abar_{t-1}) I_res + beta_t eps."""
    da = _coef(np.diff(sched.alpha_bar, prepend=0.0), t, np.asarray(i_prev))
    beta = _coef(np.sqrt(np.concatenate([[0.0], sched.beta_sq])), t, np.asarray(i_prev))
    return i_prev + da * i_res + beta * eps


def estimate_noise(i_t, i_ld, res_hat, t, sched: DiffusionSchedule) -> np.ndarray:
    bb = _coef(sched.beta_bar, t, np.asarray(i_t))
    if np.any(bb == 0):
        raise ValueError("noise is not identifiable where beta_bar_t = 0 (t = 0 or eta = 0)")
    return (i_t - i_ld + (1.0 - _coef(sched.alpha_bar, t, np.asarray(i_t))) * res_hat) / bb


def ddim_step(i_t, t, t_next, res_hat, eps_hat, sched: DiffusionSchedule, i_ld) -> np.ndarray:
    """Deterministic jump to ``t_next`` given the predicted residual and noise."""
    if np.any(np.asarray(t_next) >= np.asarray(t)):
        raise ValueError("t_next must be smaller than t")
    i_ld = np.asarray(i_ld, dtype=np.float64)
    out = i_ld - (1.0 - _coef(sched.alpha_bar, t_next, i_ld)) * res_hat
    bb = _coef(sched.beta_bar, t_next, i_ld)
    if eps_hat is not None and np.any(bb != 0):
        out = out + bb * eps_hat
    return out


@dataclass(frozen=True)
class SamplerPlan:
    timesteps: tuple[int, ...]
    stochastic_init: bool = False

    @property
    def step_count(self) -> int:
        return len(self.timesteps) - 1


def make_plan(T: int, steps: int = 2, stochastic_init: bool = False) -> SamplerPlan:
    """Uniform strictly decreasing plan from T to 0 with ``steps`` jumps."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    ts = np.rint(np.linspace(T, 0, steps + 1)).astype(int)
    if np.any(np.diff(ts) >= 0):
        raise ValueError(f"plan {ts.tolist()} is not strictly decreasing")
    return SamplerPlan(tuple(int(t) for t in ts), stochastic_init)


# ------------------------------------------------------------------ network glue


@dataclass
class Conditioning:
    e_d: np.ndarray
    e_a: np.ndarray

    def take(self, idx) -> "Conditioning":
        return Conditioning(self.e_d[idx], self.e_a[idx])


def condition(perception: PerceptionModel | None, i_ld: np.ndarray, d_e: int = 32) -> Conditioning:
    """Frozen-perception embeddings of the low-dose images (zeros without a model)."""
    if perception is None:
        n = i_ld.shape[0]
        return Conditioning(np.zeros((n, d_e)), np.zeros((n, d_e)))
    out = encode(perception, i_ld)
    return Conditioning(out.e_d, out.e_a)


def net_predictor(net: DenoiserNet, cond: Conditioning) -> Predictor:
    def predict(i_t, i_ld, t):
        dt = net.dtype
        with no_grad():
            out = net(Tensor(i_t.astype(dt)), Tensor(i_ld.astype(dt)), t,
                      Tensor(cond.e_d.astype(dt)), Tensor(cond.e_a.astype(dt)))
        return out.data.astype(np.float64)

    return predict


def residual_loss(net: DenoiserNet, i_nd, i_ld, t, eps, cond: Conditioning, sched: DiffusionSchedule) -> Tensor:
    """Mean squared error between the true residual and the prediction at (I_t, t)."""
    i_res = i_ld - i_nd
    i_t = forward_sample(i_nd, i_res, t, eps, sched)
    dt = net.dtype
    pred = net(Tensor(i_t.astype(dt)), Tensor(i_ld.astype(dt)), t,
               Tensor(cond.e_d.astype(dt)), Tensor(cond.e_a.astype(dt)))
    diff = ops.sub(pred, Tensor(i_res.astype(dt)))
    return ops.mean(ops.mul(diff, diff))


def _crop_pair(i_nd, i_ld, patch: int | None, rng: Rng):
    n, h, w = i_nd.shape
    out_nd, out_ld = [], []
    for k in range(n):
        a, b = i_nd[k], i_ld[k]
        if patch is not None and patch < h:
            r = int(rng.integers(0, h - patch + 1))
            c = int(rng.integers(0, w - patch + 1))
            a, b = a[r : r + patch, c : c + patch], b[r : r + patch, c : c + patch]
        rot = int(rng.integers(0, 4))
        flip = rng.uniform() < 0.5
        a, b = np.rot90(a, rot), np.rot90(b, rot)
        if flip:
            a, b = a[:, ::-1], b[:, ::-1]
        out_nd.append(a)
        out_ld.append(b)
    return np.stack(out_nd), np.stack(out_ld)


def draw_batch(i_nd, i_ld, cond: Conditioning, sched: DiffusionSchedule, batch_size: int, patch: int | None,
               rng: Rng):
    """Random images, crops, timesteps and noise for one step (all from ``rng``)."""
    idx = rng.integers(0, i_nd.shape[0], size=batch_size)
    nd, ld = _crop_pair(i_nd[idx], i_ld[idx], patch, rng.substream(0))
    t = rng.integers(1, sched.T + 1, size=batch_size)
    eps = rng.normal(size=nd.shape)
    return nd, ld, t, eps, cond.take(idx)


def training_step(net: DenoiserNet, batch, sched: DiffusionSchedule) -> Tensor:
    nd, ld, t, eps, cond = batch
    return residual_loss(net, nd, ld, t, eps, cond, sched)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    patch: int | None = 32
    lr: float = 1e-3
    lr_min: float = 1e-5
    clip_norm: float = 1.0
    log_every: int = 50


def train_denoiser(net: DenoiserNet, i_nd, i_ld, cond: Conditioning, sched: DiffusionSchedule, cfg: TrainConfig,
                   rng: Rng, opt: Adam | None = None, start_step: int = 0, stop_step: int | None = None,
                   callback: Callable[[int, float], None] | None = None) -> tuple[Adam, list[float]]:
    """Adam on the residual loss; batch ``k`` is drawn from ``rng.substream(k)`` so runs resume exactly.

    ``stop_step`` ends the run early without changing the learning-rate schedule.
    """
    params = net.parameters()
    opt = opt or Adam(params, cfg.lr)
    trace = []
    for step in range(start_step, cfg.steps if stop_step is None else min(stop_step, cfg.steps)):
        opt.lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)
        batch = draw_batch(i_nd, i_ld, cond, sched, cfg.batch_size, cfg.patch, rng.substream(step))
        net.zero_grad()
        try:
            loss = training_step(net, batch, sched)
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite values at step {step}: {exc}", step) from exc
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"loss diverged at step {step}", step)
        backward(loss)
        clip_grad_norm(params, cfg.clip_norm)
        opt.step()
        trace.append(value)
        if callback is not None:
            callback(step, value)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("denoiser step %d loss %.3e", step, value)
    return opt, trace


def heldout_loss(net: DenoiserNet, i_nd, i_ld, cond: Conditioning, sched: DiffusionSchedule, rng: Rng,
                 draws: int = 4, batch_size: int = 8) -> float:
    """Residual loss on fixed (t, eps) draws; the same ``rng`` gives the same draws."""
    n = i_nd.shape[0]
    total, count = 0.0, 0
    with no_grad():
        for d in range(draws):
            sub = rng.substream(d)
            t_all = sub.integers(1, sched.T + 1, size=n)
            eps_all = sub.normal(size=i_nd.shape)
            for s in range(0, n, batch_size):
                sl = slice(s, s + batch_size)
                loss = residual_loss(net, i_nd[sl], i_ld[sl], t_all[sl], eps_all[sl], cond.take(sl), sched)
                total += loss.item() * i_nd[sl].shape[0]
                count += i_nd[sl].shape[0]
    return total / count


def sample(predictor: Predictor, i_ld, plan: SamplerPlan, sched: DiffusionSchedule, rng: Rng | None = None,
           clamp: bool = True) -> np.ndarray:
    """Walk ``plan`` from I_T to I_0 and return the estimate of I_nd."""
    i_ld = np.asarray(i_ld, dtype=np.float64)
    ts = plan.timesteps
    if ts[0] != sched.T or ts[-1] != 0 or any(b >= a for a, b in zip(ts, ts[1:])):
        raise ValueError(f"plan {ts} must decrease strictly from {sched.T} to 0")
    i_t = i_ld.copy()
    if plan.stochastic_init and sched.beta_bar[-1] > 0:
        if rng is None:
            raise ValueError("stochastic_init needs an rng")
        i_t = i_t + sched.beta_bar[-1] * rng.normal(size=i_ld.shape)
    for t, t_next in zip(ts, ts[1:]):
        tb = np.full(i_ld.shape[0], t)
        res_hat = predictor(i_t, i_ld, tb)
        eps_hat = estimate_noise(i_t, i_ld, res_hat, t, sched) if sched.beta_bar[t] > 0 else None
        i_t = ddim_step(i_t, t, t_next, res_hat, eps_hat, sched, i_ld)
    return np.clip(i_t, 0.0, 1.0) if clamp else i_t


def denoise(net: DenoiserNet, perception: PerceptionModel | None, i_ld, plan: SamplerPlan,
            sched: DiffusionSchedule, rng: Rng | None = None, batch_size: int = 8,
            hook: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Denoise a stack of images; ``hook(first_index, t)`` runs before every network evaluation."""
    i_ld = check_images(i_ld, multiple_of=net.multiple)
    cond = condition(perception, i_ld, net.cfg.d_e)
    out = np.empty_like(i_ld)
    for s in range(0, i_ld.shape[0], batch_size):
        sl = slice(s, s + batch_size)
        sub = rng.substream(s) if rng is not None else None
        predictor = net_predictor(net, cond.take(sl))
        if hook is not None:
            predictor = _hooked(predictor, hook, s)
        out[sl] = sample(predictor, i_ld[sl], plan, sched, sub)
    return out


def _hooked(predictor: Predictor, hook, first: int) -> Predictor:
    def predict(i_t, i_ld, t):
        hook(first, t)
        return predictor(i_t, i_ld, t)

    return predict


class ResidualDiffusionDenoiser(RegressorMixin, BaseEstimator):
    """Estimator mapping low-dose images ``X`` to normal-dose images ``y``.

    ``perception`` is a trained :class:`PerceptionModel` (kept frozen) or
    ``None``, in which case both conditioning paths must be disabled.
    """

    def __init__(self, perception=None, widths=(16, 32, 64), n_state=4, scan_directions=4, use_dose=True,
                 use_anatomy=True, T=100, eta=0.2, steps=2000, batch_size=4, patch=32, lr=1e-3, lr_min=1e-5,
                 clip_norm=1.0, sample_steps=2, stochastic_init=False, dtype="float32", random_state=0):
        self.perception = perception
        self.widths = widths
        self.n_state = n_state
        self.scan_directions = scan_directions
        self.use_dose = use_dose
        self.use_anatomy = use_anatomy
        self.T = T
        self.eta = eta
        self.steps = steps
        self.batch_size = batch_size
        self.patch = patch
        self.lr = lr
        self.lr_min = lr_min
        self.clip_norm = clip_norm
        self.sample_steps = sample_steps
        self.stochastic_init = stochastic_init
        self.dtype = dtype
        self.random_state = random_state

    def _perception_model(self) -> PerceptionModel | None:
        p = self.perception
        if p is None:
            if self.use_dose or self.use_anatomy:
                raise ValueError("conditioning enabled but no perception model supplied")
            return None
        return getattr(p, "model_", p)

    def _net_config(self) -> DenoiserConfig:
        p = self._perception_model()
        d_e = p.d_e if p is not None else 32
        return DenoiserConfig(tuple(self.widths), self.n_state, d_e, self.scan_directions, self.use_dose,
                              self.use_anatomy)

    def fit(self, X, y):
        cfg = self._net_config()
        rng = Rng(self.random_state)
        self.net_ = DenoiserNet(cfg, rng.substream(0), dtype=np.dtype(self.dtype))
        X, Y = check_pair(X, y, multiple_of=self.net_.multiple)
        self.schedule_ = build_schedule(self.T, self.eta)
        cond = condition(self._perception_model(), X, cfg.d_e)
        tcfg = TrainConfig(self.steps, self.batch_size, self.patch, self.lr, self.lr_min, self.clip_norm)
        _, self.loss_trace_ = train_denoiser(self.net_, Y, X, cond, self.schedule_, tcfg, rng.substream(1))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        plan = make_plan(self.schedule_.T, self.sample_steps, self.stochastic_init)
        return denoise(self.net_, self._perception_model(), X, plan, self.schedule_, Rng(self.random_state, (7,)))

    def score(self, X, y) -> float:
        """Mean PSNR (dB) of the denoised images against ``y``."""
        out = self.predict(X)
        y = check_images(y)
        return float(np.mean([psnr(a, b) for a, b in zip(out, y)]))
