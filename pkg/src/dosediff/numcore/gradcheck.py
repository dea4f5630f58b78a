"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, backward


class GradCheckError(FloatingPointError):
    pass


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative disagreement between backward and five-point central differences.

    The error for one element is ``|a - n| / max(1, |a|, |n|)``. ``fn`` is
    called as ``fn(*inputs)`` and must return a single-element tensor.
    ``max_elements`` limits the number of probed entries per input (chosen
    at random) for large parameter sets.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise GradCheckError(f"function returned shape {out.shape}, expected a scalar")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        a_flat = analytic[k].reshape(-1)
        for i in idx:
            orig = flat[i]
            try:
                probes = []
                for step in (2, 1, -1, -2):
                    flat[i] = orig + step * eps
                    probes.append(fn(*inputs).item())
            except NonFiniteError as exc:
                raise GradCheckError(f"input {k}, element {int(i)}: {exc}") from exc
            finally:
                flat[i] = orig
            if not np.all(np.isfinite(probes)):
                raise GradCheckError(f"input {k}, element {int(i)}: non-finite probe value")
            f2, f1, fm1, fm2 = probes
            num = (-f2 + 8 * f1 - 8 * fm1 + fm2) / (12 * eps)
            a = float(a_flat[i])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
