"""Dose- and anatomy-conditioned U-Net that predicts the LDCT residual.

Each resolution level applies a residual local-enhance block (RLEB) and a
conditional block (DACB). The DACB is

    F1   = g1 * LN(F)  + b1 * F
    F'   = CSSM(F1, e_a) + a1 * F1 + F
    F2   = g2 * LN(F') + b2 * F'
    Fout = TA(F') + a2 * F2 + F'

where (g1, b1, a1, g2, b2, a2) come from a zero-initialised MLP of the
timestep embedding plus an adapted dose embedding, CSSM is a four-direction
selective scan whose output matrix is shifted by a projection of the anatomy
embedding, and TA is attention across channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .numcore import Conv3x3, Linear, Module, Pointwise, Rng, Tensor, ops, parameter

SCAN_DIRECTIONS = (1, 2, 4)


@dataclass
class DenoiserConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    n_state: int = 4
    d_e: int = 32
    scan_directions: int = 4
    use_dose: bool = True
    use_anatomy: bool = True

    @property
    def levels(self) -> int:
        return len(self.widths)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or min(self.widths) < 1:
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.scan_directions not in SCAN_DIRECTIONS:
            raise ValueError(f"scan_directions must be one of {SCAN_DIRECTIONS}")
        if self.n_state < 1 or self.d_e < 1:
            raise ValueError("n_state and d_e must be positive")


def timestep_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding; rows are [sin(t w_k), cos(t w_k)] over log-spaced w_k."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0):
        raise ValueError("timestep must be non-negative")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _per_channel(v: Tensor, like: Tensor) -> Tensor:
    """Broadcast a (B, C) tensor over the spatial axes of ``like``."""
    b, c = v.shape
    return ops.expand(ops.reshape(v, (b, c, 1, 1)), like.shape)


def scan_orders(h: int, w: int, directions: int = 4) -> list[np.ndarray]:
    """Flattened-pixel visiting orders: row-major, reversed, column-major, reversed."""
    grid = np.arange(h * w).reshape(h, w)
    row, col = grid.ravel(), grid.T.ravel()
    orders = [row, row[::-1], col, col[::-1]]
    return orders[:directions]


class RLEB(Module):
    def __init__(self, c: int, rng: Rng):
        self.conv1 = Conv3x3(c, c, rng)
        self.conv2 = Conv3x3(c, c, rng, zero=True)

    def __call__(self, f: Tensor) -> Tensor:
        return ops.add(f, self.conv2(ops.silu(self.conv1(f))))


class Modulation(Module):
    """Six per-channel vectors from MLP(MLP(t) + adapter(e_d)); the last layer starts at zero."""

    def __init__(self, c: int, t_dim: int, d_e: int, rng: Rng, use_dose: bool = True, adapter_rng: Rng | None = None):
        self.c = c
        self.t_proj = Linear(t_dim, c, rng)
        # drawn from its own stream so toggling it leaves the other weights unchanged
        self.dose_adapter = Linear(d_e, c, adapter_rng or rng.substream(1)) if use_dose else None
        self.mod1 = Linear(c, 4 * c, rng)
        self.mod2 = Linear(4 * c, 6 * c, rng, zero=True)

    def __call__(self, t_emb: Tensor, e_d: Tensor | None) -> list[Tensor]:
        u = self.t_proj(t_emb)
        if self.dose_adapter is not None:
            if e_d is None:
                raise ValueError("dose-conditioned block needs e_d")
            u = ops.add(u, self.dose_adapter(e_d))
        out = self.mod2(ops.silu(self.mod1(ops.silu(u))))
        c = self.c
        return [ops.gather(out, np.arange(k * c, (k + 1) * c), axis=1) for k in range(6)]


class CSSM(Module):
    """Multi-direction selective scan with the anatomy embedding added to C."""

    def __init__(self, c: int, n_state: int, d_e: int, rng: Rng, directions: int = 4, use_anatomy: bool = True):
        self.directions = directions
        self.in_proj = Pointwise(c, c, rng)
        self.delta_proj = Linear(c, c, rng)
        self.B_proj = Linear(c, n_state, rng, bias=False)
        self.C_proj = Linear(c, n_state, rng, bias=False)
        self.anatomy_proj = Linear(d_e, n_state, rng, bias=False, zero=True) if use_anatomy else None
        self.A_log = parameter(np.log(np.tile(np.arange(1, n_state + 1, dtype=np.float64), (c, 1))))
        self.D_skip = parameter(np.ones(c))
        # random, not zero: F1 = 0 at init already makes this block vanish, and a
        # zero projection here would leave the modulation with no gradient
        self.out_proj = Pointwise(c, c, rng)

    def __call__(self, f: Tensor, e_a: Tensor | None) -> Tensor:
        b, c, h, w = f.shape
        L = h * w
        x = self.in_proj(f)
        seq = ops.transpose(ops.reshape(x, (b, c, L)))  # (b, L, c)
        orders = scan_orders(h, w, self.directions)
        k = len(orders)
        xs = ops.concat([ops.gather(seq, o, axis=1) for o in orders], axis=0)  # (k b, L, c)
        delta = ops.softplus(self.delta_proj(xs))
        Bm = self.B_proj(xs)
        Cm = self.C_proj(xs)
        if self.anatomy_proj is not None:
            if e_a is None:
                raise ValueError("anatomy-conditioned block needs e_a")
            pa = self.anatomy_proj(e_a)  # (b, n)
            pa = ops.concat([pa] * k, axis=0)
            n = pa.shape[1]
            Cm = ops.add(Cm, ops.expand(ops.reshape(pa, (k * b, 1, n)), Cm.shape))
        A = ops.scale(ops.exp(self.A_log), -1.0)
        ys = ops.selective_scan(xs, delta, A, Bm, Cm, self.D_skip)
        merged = None
        for d, o in enumerate(orders):
            part = ops.gather(ops.gather(ys, np.arange(d * b, (d + 1) * b), axis=0), np.argsort(o), axis=1)
            merged = part if merged is None else ops.add(merged, part)
        out = ops.reshape(ops.transpose(merged), (b, c, h, w))
        return self.out_proj(out)


class TransposedAttention(Module):
    """Self-attention over channels: a C x C map per head."""

    def __init__(self, c: int, rng: Rng, heads: int | None = None):
        heads = heads or max(1, c // 16)
        if c % heads:
            raise ValueError(f"{c} channels not divisible into {heads} heads")
        self.heads = heads
        self.q = Pointwise(c, c, rng)
        self.k = Pointwise(c, c, rng)
        self.v = Pointwise(c, c, rng)
        self.temperature = parameter(np.ones(heads))
        self.out_proj = Pointwise(c, c, rng, zero=True)

    def attention(self, f: Tensor) -> tuple[Tensor, Tensor]:
        b, c, h, w = f.shape
        shape = (b, self.heads, c // self.heads, h * w)
        q = ops.l2_normalize(ops.reshape(self.q(f), shape))
        k = ops.l2_normalize(ops.reshape(self.k(f), shape))
        v = ops.reshape(self.v(f), shape)
        logits = ops.matmul(q, ops.transpose(k))
        temp = ops.expand(ops.reshape(self.temperature, (1, self.heads, 1, 1)), logits.shape)
        return ops.softmax(ops.mul(logits, temp)), v

    def __call__(self, f: Tensor) -> Tensor:
        attn, v = self.attention(f)
        return self.out_proj(ops.reshape(ops.matmul(attn, v), f.shape))


class DACB(Module):
    def __init__(self, c: int, t_dim: int, cfg: DenoiserConfig, rng: Rng, adapter_rng: Rng | None = None):
        self.modulation = Modulation(c, t_dim, cfg.d_e, rng, use_dose=cfg.use_dose, adapter_rng=adapter_rng)
        self.cssm = CSSM(c, cfg.n_state, cfg.d_e, rng, cfg.scan_directions, use_anatomy=cfg.use_anatomy)
        self.attn = TransposedAttention(c, rng)

    def __call__(self, f: Tensor, t_emb: Tensor, e_d: Tensor | None, e_a: Tensor | None) -> Tensor:
        g1, b1, a1, g2, b2, a2 = (_per_channel(m, f) for m in self.modulation(t_emb, e_d))
        f1 = ops.add(ops.mul(g1, ops.layer_norm(f, axis=1)), ops.mul(b1, f))
        fp = ops.add(ops.add(self.cssm(f1, e_a), ops.mul(a1, f1)), f)
        f2 = ops.add(ops.mul(g2, ops.layer_norm(fp, axis=1)), ops.mul(b2, fp))
        return ops.add(ops.add(self.attn(fp), ops.mul(a2, f2)), fp)


class DenoiserNet(Module):
    """U-Net over channel-stacked (I_t, I_ld) predicting the residual I_ld - I_nd."""

    def __init__(self, cfg: DenoiserConfig | None = None, rng: Rng | None = None, dtype=np.float64):
        cfg = cfg or DenoiserConfig()
        rng = rng or Rng(0)
        self.cfg = cfg
        ws = cfg.widths
        self.t_dim = ws[0] + ws[0] % 2
        self.in_proj = Conv3x3(2, ws[0], rng)
        self.enc_rleb = [RLEB(w, rng) for w in ws]
        self.enc_dacb = [DACB(w, self.t_dim, cfg, rng, rng.substream(1, i)) for i, w in enumerate(ws)]
        self.down = [Conv3x3(ws[i], ws[i + 1], rng, stride=2) for i in range(len(ws) - 1)]
        self.up = [Conv3x3(ws[i + 1], ws[i], rng) for i in range(len(ws) - 1)]
        self.fuse = [Pointwise(2 * ws[i], ws[i], rng, bias=True) for i in range(len(ws) - 1)]
        self.dec_rleb = [RLEB(ws[i], rng) for i in range(len(ws) - 1)]
        self.dec_dacb = [DACB(ws[i], self.t_dim, cfg, rng, rng.substream(2, i)) for i in range(len(ws) - 1)]
        self.out_proj = Conv3x3(ws[0], 1, rng, zero=True)
        self.astype(dtype)

    @property
    def dtype(self):
        return self.in_proj.weight.dtype

    @property
    def multiple(self) -> int:
        return 2 ** (self.cfg.levels - 1)

    def blocks(self) -> list[DACB]:
        return list(self.enc_dacb) + list(self.dec_dacb)

    def __call__(self, i_t: Tensor, i_ld: Tensor, t, e_d: Tensor | None = None, e_a: Tensor | None = None) -> Tensor:
        """Inputs are (B, H, W) images; ``t`` is one step per image. Returns (B, H, W)."""
        if i_t.shape != i_ld.shape or i_t.ndim != 3:
            raise ValueError(f"I_t {i_t.shape} and I_ld {i_ld.shape} must be equal (B, H, W)")
        b, h, w = i_t.shape
        if h % self.multiple or w % self.multiple:
            raise ValueError(f"image sides must be multiples of {self.multiple}, got {h}x{w}")
        t = np.broadcast_to(np.asarray(t), (b,))
        t_emb = Tensor(timestep_embed(t, self.t_dim).astype(self.dtype))
        x = ops.concat([ops.reshape(i_t, (b, 1, h, w)), ops.reshape(i_ld, (b, 1, h, w))], axis=1)
        f = self.in_proj(x)
        skips = []
        n = self.cfg.levels
        for i in range(n):
            f = self.enc_dacb[i](self.enc_rleb[i](f), t_emb, e_d, e_a)
            if i < n - 1:
                skips.append(f)
                f = self.down[i](f)
        for i in range(n - 2, -1, -1):
            f = self.up[i](ops.upsample_nearest2x(f))
            f = self.fuse[i](ops.concat([f, skips[i]], axis=1))
            f = self.dec_dacb[i](self.dec_rleb[i](f), t_emb, e_d, e_a)
        return ops.reshape(self.out_proj(f), (b, h, w))


def config_to_array(cfg: DenoiserConfig) -> dict[str, np.ndarray]:
    return {
        "meta.widths": np.asarray(cfg.widths, dtype=np.float32),
        "meta.flags": np.asarray([cfg.n_state, cfg.d_e, cfg.scan_directions, cfg.use_dose, cfg.use_anatomy],
                                 dtype=np.float32),
    }


def config_from_arrays(state: dict[str, np.ndarray]) -> DenoiserConfig:
    widths = tuple(int(v) for v in state.pop("meta.widths"))
    n_state, d_e, dirs, use_dose, use_anatomy = (int(v) for v in state.pop("meta.flags"))
    return DenoiserConfig(widths, n_state, d_e, dirs, bool(use_dose), bool(use_anatomy))


def save_denoiser(path, net: DenoiserNet, extra: dict[str, np.ndarray] | None = None) -> None:
    params = dict(config_to_array(net.cfg))
    params.update(net.state_dict())
    params.update(extra or {})
    fileio.save_checkpoint(path, fileio.DENOISER_MAGIC, params)


def load_denoiser(path, dtype=np.float64) -> tuple[DenoiserNet, dict[str, np.ndarray]]:
    state = fileio.load_checkpoint(path, fileio.DENOISER_MAGIC)
    cfg = config_from_arrays(state)
    extra = {k: state.pop(k) for k in list(state) if k.startswith(("opt.", "train."))}
    net = DenoiserNet(cfg, Rng(0), dtype=dtype)
    net.load_state_dict(state)
    return net, extra
