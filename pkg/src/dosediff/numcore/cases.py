"""Random differentiable instances of every primitive, for gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .tensor import Tensor


def _t(rng: np.random.Generator, *shape, positive: bool = False) -> Tensor:
    data = rng.uniform(0.5, 2.0, shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


def _dim(rng, lo=1, hi=4) -> int:
    return int(rng.integers(lo, hi + 1))


def _readout(rng: np.random.Generator, y: Tensor) -> Tensor:
    # random linear readout so every output element contributes a distinct weight
    w = Tensor(rng.normal(size=y.shape))
    return ops.sum(ops.mul(y, w))


def make_case(kind: str, rng: np.random.Generator) -> tuple[Callable[..., Tensor], list[Tensor]]:
    """Return ``(fn, inputs)`` with ``fn(*inputs)`` a scalar exercising ``kind``."""
    if kind == "matmul":
        m, k, n = _dim(rng), _dim(rng), _dim(rng)
        if rng.random() < 0.5:
            b = _dim(rng, 1, 3)
            ins = [_t(rng, b, m, k), _t(rng, b, k, n)]
        else:
            ins = [_t(rng, _dim(rng, 1, 3), m, k), _t(rng, k, n)]
        w = Tensor(rng.normal(size=ins[0].shape[:-1] + (n,)))
        return (lambda a, b_: ops.sum(ops.mul(ops.matmul(a, b_), w))), ins
    if kind == "conv2d_3x3_pad1":
        n, c, o = _dim(rng, 1, 2), _dim(rng, 1, 3), _dim(rng, 1, 3)
        h, wd = _dim(rng, 2, 6), _dim(rng, 2, 6)
        stride = int(rng.integers(1, 3))
        ins = [_t(rng, n, c, h, wd), _t(rng, o, c, 3, 3), _t(rng, o)]
        ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
        w = Tensor(rng.normal(size=(n, o, ho, wo)))
        return (lambda x, k, b: ops.sum(ops.mul(ops.conv2d(x, k, b, stride=stride), w))), ins
    if kind == "pointwise_conv":
        n, c, o, h, wd = _dim(rng, 1, 2), _dim(rng), _dim(rng), _dim(rng), _dim(rng)
        ins = [_t(rng, n, c, h, wd), _t(rng, o, c), _t(rng, o)]
        w = Tensor(rng.normal(size=(n, o, h, wd)))
        return (lambda x, k, b: ops.sum(ops.mul(ops.pointwise_conv(x, k, b), w))), ins
    if kind == "layer_norm":
        shape = (_dim(rng), _dim(rng, 2, 6), _dim(rng, 1, 3))
        axis = int(rng.integers(0, 3))
        if shape[axis] < 2:
            axis = 1
        ins = [_t(rng, *shape)]
        w = Tensor(rng.normal(size=shape))
        return (lambda x: ops.sum(ops.mul(ops.layer_norm(x, axis=axis), w))), ins
    if kind == "softmax_last_dim":
        ins = [_t(rng, _dim(rng), _dim(rng, 1, 6))]
        w = Tensor(rng.normal(size=ins[0].shape))
        return (lambda x: ops.sum(ops.mul(ops.softmax(x), w))), ins
    if kind in ("softplus", "exp", "silu", "log"):
        fn = {"softplus": ops.softplus, "exp": ops.exp, "silu": ops.silu, "log": ops.log}[kind]
        ins = [_t(rng, _dim(rng), _dim(rng), positive=kind == "log")]
        w = Tensor(rng.normal(size=ins[0].shape))
        return (lambda x: ops.sum(ops.mul(fn(x), w))), ins
    if kind in ("add", "mul", "sub"):
        fn = {"add": ops.add, "mul": ops.mul, "sub": ops.sub}[kind]
        shape = (_dim(rng), _dim(rng), _dim(rng))
        ins = [_t(rng, *shape), _t(rng, *shape)]
        w = Tensor(rng.normal(size=shape))
        return (lambda a, b: ops.sum(ops.mul(fn(a, b), w))), ins
    if kind == "scalar_scale":
        c = float(rng.normal())
        ins = [_t(rng, _dim(rng), _dim(rng))]
        w = Tensor(rng.normal(size=ins[0].shape))
        return (lambda x: ops.sum(ops.mul(ops.scale(x, c), w))), ins
    if kind in ("sum", "mean"):
        fn = ops.sum if kind == "sum" else ops.mean
        shape = (_dim(rng), _dim(rng), _dim(rng))
        axis = None if rng.random() < 0.3 else int(rng.integers(0, 3))
        ins = [_t(rng, *shape)]
        # square the reduction so the readout is nonlinear
        return (lambda x: ops.sum(ops.mul(fn(x, axis=axis), fn(x, axis=axis)))), ins
    if kind == "concat_channels":
        n, h = _dim(rng), _dim(rng)
        ins = [_t(rng, n, _dim(rng), h), _t(rng, n, _dim(rng), h)]
        c = ins[0].shape[1] + ins[1].shape[1]
        w = Tensor(rng.normal(size=(n, c, h)))
        return (lambda a, b: ops.sum(ops.mul(ops.concat([a, b], axis=1), w))), ins
    if kind == "transpose_2d":
        shape = (_dim(rng), _dim(rng), _dim(rng))
        ins = [_t(rng, *shape)]
        w = Tensor(rng.normal(size=(shape[0], shape[2], shape[1])))
        return (lambda x: ops.sum(ops.mul(ops.transpose(x, 1, 2), w))), ins
    if kind == "gather_sequence":
        n, L, d = _dim(rng), _dim(rng, 2, 6), _dim(rng)
        idx = rng.permutation(L) if rng.random() < 0.5 else rng.integers(0, L, size=L + 2)
        ins = [_t(rng, n, L, d)]
        w = Tensor(rng.normal(size=(n, idx.size, d)))
        return (lambda x: ops.sum(ops.mul(ops.gather(x, idx, axis=1), w))), ins
    if kind == "reshape":
        ins = [_t(rng, 2, 3, _dim(rng))]
        w = Tensor(rng.normal(size=(6, ins[0].shape[2])))
        return (lambda x: ops.sum(ops.mul(ops.reshape(x, (6, -1)), w))), ins
    if kind == "expand":
        n, c = _dim(rng), _dim(rng)
        ins = [_t(rng, n, c, 1, 1)]
        w = Tensor(rng.normal(size=(n, c, 3, 2)))
        return (lambda x: ops.sum(ops.mul(ops.expand(x, (n, c, 3, 2)), w))), ins
    if kind == "bias_add":
        shape = (_dim(rng), _dim(rng), _dim(rng))
        axis = int(rng.integers(0, 3))
        ins = [_t(rng, *shape), _t(rng, shape[axis])]
        w = Tensor(rng.normal(size=shape))
        return (lambda x, b: ops.sum(ops.mul(ops.bias_add(x, b, axis=axis), w))), ins
    if kind == "l2_normalize":
        ins = [_t(rng, _dim(rng), _dim(rng, 2, 5))]
        w = Tensor(rng.normal(size=ins[0].shape))
        return (lambda x: ops.sum(ops.mul(ops.l2_normalize(x), w))), ins
    if kind == "upsample_nearest2x":
        ins = [_t(rng, _dim(rng, 1, 2), _dim(rng), _dim(rng), _dim(rng))]
        s = ins[0].shape
        w = Tensor(rng.normal(size=s[:2] + (2 * s[2], 2 * s[3])))
        return (lambda x: ops.sum(ops.mul(ops.upsample_nearest2x(x), w))), ins
    if kind == "selective_scan":
        b, L, d, n = _dim(rng, 1, 2), _dim(rng, 1, 6), _dim(rng, 1, 3), _dim(rng, 1, 3)
        x = _t(rng, b, L, d)
        delta = Tensor(rng.uniform(0.1, 1.0, (b, L, d)), requires_grad=True)
        A = Tensor(-rng.uniform(0.2, 1.5, (d, n)), requires_grad=True)
        ins = [x, delta, A, _t(rng, b, L, n), _t(rng, b, L, n), _t(rng, d)]
        w = Tensor(rng.normal(size=(b, L, d)))
        return (lambda *a: ops.sum(ops.mul(ops.selective_scan(*a), w))), ins
    raise ValueError(f"no gradient case for {kind!r}")
