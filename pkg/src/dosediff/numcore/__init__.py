"""Minimal dense tensors with reverse-mode differentiation."""

from . import ops
from .gradcheck import GradCheckError, grad_check
from .nn import SGD, Adam, Conv3x3, Linear, Module, Pointwise, parameter
from .ops import EXTRA_OP_KINDS, OP_KINDS
from .rng import Rng
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    corrupt_backward,
    no_grad,
)


def forward(op: str, inputs, **attrs) -> Tensor:
    """Dispatch a primitive by its kind name."""
    table = {
        "matmul": ops.matmul,
        "conv2d_3x3_pad1": ops.conv2d,
        "pointwise_conv": ops.pointwise_conv,
        "layer_norm": ops.layer_norm,
        "softmax_last_dim": ops.softmax,
        "softplus": ops.softplus,
        "exp": ops.exp,
        "silu": ops.silu,
        "add": ops.add,
        "mul": ops.mul,
        "scalar_scale": ops.scale,
        "sum": ops.sum,
        "mean": ops.mean,
        "concat_channels": lambda *xs, axis=1: ops.concat(xs, axis=axis),
        "transpose_2d": ops.transpose,
        "gather_sequence": ops.gather,
        "sub": ops.sub,
        "log": ops.log,
        "reshape": ops.reshape,
        "expand": ops.expand,
        "bias_add": ops.bias_add,
        "l2_normalize": ops.l2_normalize,
        "upsample_nearest2x": ops.upsample_nearest2x,
        "selective_scan": ops.selective_scan,
    }
    if op not in table:
        raise ValueError(f"unknown op {op!r}")
    return table[op](*inputs, **attrs)


__all__ = [
    "Adam",
    "Conv3x3",
    "EXTRA_OP_KINDS",
    "GradCheckError",
    "Linear",
    "Module",
    "NonFiniteError",
    "OP_KINDS",
    "Pointwise",
    "Rng",
    "SGD",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "corrupt_backward",
    "forward",
    "grad_check",
    "no_grad",
    "ops",
    "parameter",
]
