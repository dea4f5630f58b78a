"""Self-check suites: gradients, scan and loss oracles, projector, sampler exactness.

The reference evaluators here are deliberately naive loops over Python
floats, written independently of the vectorised implementations they check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ctsim
from . import diffusion as F
from . import perception as P
from .metrics import psnr
from .numcore import EXTRA_OP_KINDS, OP_KINDS, Rng, Tensor, corrupt_backward, grad_check, ops
from .numcore.cases import make_case

# ------------------------------------------------------------------ reference evaluators


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def rank_loss_reference(e, y, tau) -> float:
    n = len(e)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            dij = abs(y[i] - y[j])
            denom = 0.0
            for k in range(n):
                if k != i and abs(y[i] - y[k]) >= dij:
                    denom += math.exp(_dot(e[i], e[k]) / tau)
            total += -math.log(math.exp(_dot(e[i], e[j]) / tau) / denom)
    return total / (n * (n - 1))


def anatomy_loss_reference(e, labels, tau) -> float:
    n = len(e)
    total = 0.0
    for i in range(n):
        denom = sum(math.exp(_dot(e[i], e[j]) / tau) for j in range(n) if j != i)
        pos = [p for p in range(n) if p != i and labels[p] == labels[i]]
        acc = sum(math.log(math.exp(_dot(e[i], e[p]) / tau) / denom) for p in pos)
        total += -acc / len(pos)
    return total


def scan_reference(x, delta, A, B, C, D):
    """h_l = exp(delta A) h_{l-1} + delta B x_l, y_l = C h_l + D x_l, one channel at a time."""
    batch, L, dim = len(x), len(x[0]), len(x[0][0])
    n = len(A[0])
    out = [[[0.0] * dim for _ in range(L)] for _ in range(batch)]
    for b in range(batch):
        for d in range(dim):
            h = [0.0] * n
            for l in range(L):
                for s in range(n):
                    h[s] = math.exp(delta[b][l][d] * A[d][s]) * h[s] + delta[b][l][d] * B[b][l][s] * x[b][l][d]
                out[b][l][d] = sum(C[b][l][s] * h[s] for s in range(n)) + D[d] * x[b][l][d]
    return out


# ------------------------------------------------------------------ random instances


def random_scan_instance(rng: Rng, max_L: int = 16, max_D: int = 4, max_N: int = 4):
    b = int(rng.integers(1, 3))
    L = int(rng.integers(1, max_L + 1))
    d = int(rng.integers(1, max_D + 1))
    n = int(rng.integers(1, max_N + 1))
    return (rng.normal(size=(b, L, d)), rng.uniform(0.01, 2.0, (b, L, d)), -rng.uniform(0.05, 3.0, (d, n)),
            rng.normal(size=(b, L, n)), rng.normal(size=(b, L, n)), rng.normal(size=d))


def random_unit(rng: Rng, n: int, d: int) -> np.ndarray:
    e = rng.normal(size=(n, d))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def random_rank_batch(rng: Rng):
    n = int(rng.integers(2, 5)) * 2
    e = random_unit(rng, n, int(rng.integers(2, 9)))
    y = rng.generator.choice(ctsim.DOSE_MENU, size=n)
    return e, y, float(rng.uniform(0.05, 1.0))


def random_anatomy_batch(rng: Rng):
    n = int(rng.integers(2, 6)) * 2
    k = int(rng.integers(1, min(3, n // 2) + 1))
    labels = np.array([ctsim.FAMILIES[i % k] for i in range(n)])[rng.permutation(n)]
    e = random_unit(rng, n, int(rng.integers(2, 9)))
    return e, labels, float(rng.uniform(0.05, 1.0))


# ------------------------------------------------------------------ suites


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{self.name:<12} {status}  max_err={self.max_error:.3e}  tol={self.tolerance:.0e}  {self.seconds:.1f}s{extra}"


def suite_gradients(instances: int = 20, tol: float = 1e-6, seed: int = 0) -> SuiteResult:
    worst, worst_op = 0.0, ""
    failing = []
    for kind in OP_KINDS + EXTRA_OP_KINDS:
        gen = np.random.default_rng([seed, sum(map(ord, kind))])
        err_kind = 0.0
        for _ in range(instances):
            fn, inputs = make_case(kind, gen)
            err_kind = max(err_kind, grad_check(fn, inputs))
        if err_kind > worst:
            worst, worst_op = err_kind, kind
        if not err_kind < tol:
            failing.append(kind)
    detail = f"failing ops: {', '.join(failing)}" if failing else f"worst op: {worst_op}"
    return SuiteResult("gradients", not failing, worst, tol, 0.0, detail)


def suite_scan(instances: int = 100, tol: float = 1e-12, seed: int = 0) -> SuiteResult:
    worst = 0.0
    for k in range(instances):
        args = random_scan_instance(Rng(seed, (k,)))
        got = ops.selective_scan(*(Tensor(a) for a in args)).data
        ref = np.array(scan_reference(*(a.tolist() for a in args)))
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return SuiteResult("scan", worst < tol, worst, tol, 0.0)


def suite_losses(instances: int = 50, tol: float = 1e-10, seed: int = 0) -> SuiteResult:
    worst = 0.0
    for k in range(instances):
        e, y, tau = random_rank_batch(Rng(seed, (1, k)))
        got = P.loss_rank(Tensor(e), y, tau).item()
        worst = max(worst, abs(got - rank_loss_reference(e.tolist(), y.tolist(), tau)))
        e, labels, tau = random_anatomy_batch(Rng(seed, (2, k)))
        got = P.loss_anatomy(Tensor(e), labels, tau).item()
        worst = max(worst, abs(got - anatomy_loss_reference(e.tolist(), labels.tolist(), tau)))
    return SuiteResult("losses", worst < tol, worst, tol, 0.0)


def projector_errors(seed: int = 0, size: int = 256, n_views: int = 180) -> tuple[float, float]:
    """(relative RMSE numeric vs analytic sinogram, FBP PSNR of a disk inside the unit circle)."""
    ph = ctsim.make_phantom("abdomen", Rng(seed))
    g = ctsim.ScanGeometry(n_views, size + 1, 2.0 / size)
    ana = ctsim.project_analytic(ph, g)
    num = ctsim.project_numeric(ctsim.rasterize(ph, size), g)
    rel = float(np.sqrt(np.mean((num - ana) ** 2)) / np.sqrt(np.mean(ana**2)))
    disk = ctsim.EllipsePhantom([ctsim.Ellipse(0.0, 0.0, 0.5, 0.5, 0.0, 1.0)], "abdomen")
    rec = ctsim.fbp(ctsim.project_analytic(disk, g), g, size)
    ref = ctsim.rasterize(disk, size)
    x, y = ctsim.pixel_centers(size)
    inside = x * x + y * y <= 1.0
    return rel, psnr(rec[inside], ref[inside])


def suite_projector(seed: int = 0, size: int = 256) -> SuiteResult:
    rel, fbp_psnr = projector_errors(seed, size)
    ok = rel < 0.02 and fbp_psnr >= 25.0
    return SuiteResult("projector", ok, rel, 0.02, 0.0, f"fbp_psnr={fbp_psnr:.2f}dB")


def sampler_max_error(seed: int = 0, size: int = 16) -> float:
    rng = Rng(seed)
    sched = F.build_schedule(100, 0.2)
    nd = rng.uniform(0.1, 0.9, (3, size, size))
    ld = nd + rng.normal(scale=0.05, size=nd.shape)
    worst = 0.0
    for steps in (1, 2, 10):
        for stochastic in (False, True):
            out = F.sample(lambda i_t, i_ld, t: ld - nd, ld, F.make_plan(sched.T, steps, stochastic), sched,
                           rng.substream(steps, stochastic), clamp=False)
            worst = max(worst, float(np.max(np.abs(out - nd))))
    return worst


def suite_sampler(seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    err = sampler_max_error(seed)
    return SuiteResult("sampler", err < tol, err, tol, 0.0)


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "gradients": suite_gradients,
    "scan": suite_scan,
    "losses": suite_losses,
    "projector": suite_projector,
    "sampler": suite_sampler,
}


def run_suites(names=None, seed: int = 0, fault: str | None = None, projector_size: int = 256) -> list[SuiteResult]:
    """Run the named suites (all by default); ``fault`` corrupts one op's backward rule."""
    names = list(names or SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suites: {unknown}")
    results = []
    for name in names:
        start = time.perf_counter()
        if fault is not None:
            with corrupt_backward(fault):
                res = _run_one(name, seed, projector_size)
        else:
            res = _run_one(name, seed, projector_size)
        res.seconds = time.perf_counter() - start
        results.append(res)
    return results


def _run_one(name: str, seed: int, projector_size: int) -> SuiteResult:
    if name == "projector":
        return suite_projector(seed, projector_size)
    return SUITES[name](seed=seed)
