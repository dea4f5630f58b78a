"""Differentiable primitives.

Every op validates shapes up front, computes its forward value with numpy and
returns a closure mapping the output gradient to one gradient per input.
Broadcasting is never implicit: use :func:`expand` or :func:`bias_add`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, ShapeError, Tensor, make_result

OP_KINDS = (
    "matmul",
    "conv2d_3x3_pad1",
    "pointwise_conv",
    "layer_norm",
    "softmax_last_dim",
    "softplus",
    "exp",
    "silu",
    "add",
    "mul",
    "scalar_scale",
    "sum",
    "mean",
    "concat_channels",
    "transpose_2d",
    "gather_sequence",
)
# helpers beyond the core set; all carry analytic backward rules
EXTRA_OP_KINDS = (
    "sub",
    "log",
    "reshape",
    "expand",
    "bias_add",
    "l2_normalize",
    "upsample_nearest2x",
    "selective_scan",
)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scalar_scale")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log: non-positive input")
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    y = np.logaddexp(0.0, xd).astype(xd.dtype, copy=False)
    return make_result(y, (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def bw(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return make_result(xd * s, (x,), bw, "silu")


# ---------------------------------------------------------------- reductions / shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    y = np.sum(x.data, axis=axes, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(y, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    y = np.mean(x.data, axis=axes, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_result(np.asarray(y, dtype=x.dtype), (x,), bw, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    src = x.shape
    return make_result(y, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axis1: int = -2, axis2: int = -1) -> Tensor:
    """Swap two axes (the 2-D transpose when applied to a matrix)."""
    y = np.ascontiguousarray(np.swapaxes(x.data, axis1, axis2))
    return make_result(y, (x,), lambda g: (np.ascontiguousarray(np.swapaxes(g, axis1, axis2)),), "transpose_2d")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes up to ``shape`` (ranks must agree)."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)
    y = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return make_result(y, (x,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


def bias_add(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along ``axis`` (the channel-wise bias broadcast)."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return make_result(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=others)), "bias_add")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: empty input list")
    nd = xs[0].ndim
    axis = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(t.shape[i] != xs[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[u.shape for u in xs]}")
    y = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return make_result(y, tuple(xs), bw, "concat_channels")


def gather(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries of ``x`` along ``axis`` by integer index (sequence reordering)."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    n = x.shape[axis]
    if index.ndim != 1 or (index.size and (index.min() < -n or index.max() >= n)):
        raise ShapeError(f"gather: index out of range for axis {axis} of {x.shape}")
    index = index % n
    y = np.take(x.data, index, axis=axis)
    shape = x.shape
    is_perm = index.size == n and np.array_equal(np.sort(index), np.arange(n))
    inverse = np.argsort(index) if is_perm else None
    contiguous = index.size > 0 and np.array_equal(index, np.arange(index[0], index[0] + index.size))

    def bw(g):
        if inverse is not None:
            return (np.take(g, inverse, axis=axis),)
        out = np.zeros(shape, dtype=g.dtype)
        if contiguous:
            sl = [slice(None)] * len(shape)
            sl[axis] = slice(int(index[0]), int(index[0]) + index.size)
            out[tuple(sl)] = g
            return (out,)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return make_result(y, (x,), bw, "gather_sequence")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    y = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return make_result(y, (x,), bw, "upsample_nearest2x")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product.

    ``b`` is either 2-D (shared across ``a``'s batch) or has exactly ``a``'s
    batch dims.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims disagree {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    y = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_result(y, (a, b), bw, "matmul")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 on N x C x H x W input."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d_3x3_pad1: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d_3x3_pad1: bias {b.shape} for {w.shape[0]} outputs")
    n, c, h, wd = x.shape
    s = int(stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    wd_ = w.data
    y = np.tensordot(win, wd_, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1)
    y = np.ascontiguousarray(y)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for ki in range(3):
            for kj in range(3):
                contrib = np.tensordot(g, wd_[:, :, ki, kj], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, ki : ki + s * ho : s, kj : kj + s * wo : s] += contrib
        gx = np.ascontiguousarray(gxp[:, :, 1 : h + 1, 1 : wd + 1])
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return make_result(y, parents, bw, "conv2d_3x3_pad1")


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution: weight is C_out x C_in, input N x C_in x H x W."""
    if x.ndim != 4 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise_conv: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"pointwise_conv: bias {b.shape} for {w.shape[0]} outputs")
    xd, wd = x.data, w.data
    y = np.einsum("oc,nchw->nohw", wd, xd, optimize=True)
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1)

    def bw(g):
        gx = np.einsum("oc,nohw->nchw", wd, g, optimize=True)
        gw = np.einsum("nohw,nchw->oc", g, xd, optimize=True)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return make_result(np.ascontiguousarray(y), parents, bw, "pointwise_conv")


# ---------------------------------------------------------------- normalisation


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` (no affine)."""
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make_result(xhat, (x,), bw, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax_last_dim")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True) + eps)
    y = xd / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return make_result(y, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------- selective scan


def selective_scan(
    x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor
) -> Tensor:
    """Input-dependent diagonal linear recurrence over the sequence axis.

    Shapes: ``x``, ``delta`` are (batch, L, D); ``A`` is (D, N); ``B``, ``C``
    are (batch, L, N); ``D`` is (D,).  With Abar = exp(delta * A) and
    Bbar = delta * B::

        h_l = Abar_l * h_{l-1} + Bbar_l * x_l,   h_0 = 0
        y_l = <C_l, h_l> + D * x_l
    """
    if x.ndim != 3 or delta.shape != x.shape:
        raise ShapeError(f"selective_scan: x {x.shape} / delta {delta.shape} must be equal (batch, L, D)")
    bsz, L, d = x.shape
    if A.ndim != 2 or A.shape[0] != d:
        raise ShapeError(f"selective_scan: A {A.shape} does not match D={d}")
    n = A.shape[1]
    if B.shape != (bsz, L, n) or C.shape != (bsz, L, n) or D.shape != (d,):
        raise ShapeError(f"selective_scan: B {B.shape}, C {C.shape}, D {D.shape} vs x {x.shape}, A {A.shape}")
    xd, dd, Ad, Bd, Cd, Dd = x.data, delta.data, A.data, B.data, C.data, D.data

    # sequence-major layout keeps each step's slab contiguous
    dA = np.exp(np.einsum("bld,dn->lbdn", dd, Ad))
    dBx = np.einsum("bld,bln->lbdn", dd * xd, Bd)
    H = np.empty_like(dA)
    h = np.zeros_like(dA[0])
    for l in range(L):
        np.multiply(dA[l], h, out=h)
        h += dBx[l]
        H[l] = h
    if not np.all(np.isfinite(H)):
        bad = int(np.argmax(~np.isfinite(H).reshape(L, -1).all(axis=1)))
        raise NonFiniteError(f"selective_scan: non-finite state at position {bad}")
    y = np.einsum("lbdn,bln->bld", H, Cd) + Dd * xd

    def bw(g):
        gC = np.einsum("bld,lbdn->bln", g, H)
        gD = (g * xd).sum(axis=(0, 1))
        gx = g * Dd
        gH = np.einsum("bld,bln->lbdn", g, Cd)
        # reverse pass: gh_l = gH_l + Abar_{l+1} * gh_{l+1}
        gh = np.zeros_like(h)
        for l in range(L - 1, -1, -1):
            if l < L - 1:
                gh *= dA[l + 1]
            gh += gH[l]
            gH[l] = gh
        gdBx = gH
        Hprev = np.empty_like(H)
        Hprev[0] = 0.0
        Hprev[1:] = H[:-1]
        gdA_pre = gH * Hprev * dA  # d/d(delta*A)
        gdelta = np.einsum("lbdn,dn->bld", gdA_pre, Ad)
        gA = np.einsum("lbdn,bld->dn", gdA_pre, dd)
        gdBx_B = np.einsum("lbdn,bln->bld", gdBx, Bd)
        gdelta = gdelta + gdBx_B * xd
        gx = gx + gdBx_B * dd
        gB = np.einsum("lbdn,bld->bln", gdBx, dd * xd)
        return gx, gdelta, gA, gB, gC, gD

    return make_result(np.ascontiguousarray(y), (x, delta, A, B, C, D), bw, "selective_scan")
