import math

import numpy as np
import pytest

from dosediff import verify as V
from dosediff.numcore import Rng, corrupt_backward


def test_rank_reference_tiny_by_hand():
    # two samples: each has one other sample, so the softmax is over one term
    e = [[1.0, 0.0], [0.0, 1.0]]
    assert V.rank_loss_reference(e, [0.5, 0.25], 0.1) == pytest.approx(0.0)


def test_anatomy_reference_by_hand():
    e = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
    tau = 0.5
    # each sample: one positive with dot 1, one positive-free pair of dot 0
    per = -math.log(math.exp(2.0) / (math.exp(2.0) + 2.0))
    assert V.anatomy_loss_reference(e, ["a", "a", "b", "b"], tau) == pytest.approx(4 * per)


def test_scan_reference_single_step():
    out = V.scan_reference([[[2.0]]], [[[0.5]]], [[-1.0]], [[[3.0]]], [[[4.0]]], [0.25])
    assert out[0][0][0] == pytest.approx(4.0 * 0.5 * 3.0 * 2.0 + 0.25 * 2.0)


def test_random_instances_in_bounds():
    for k in range(20):
        x, delta, A, B, C, D = V.random_scan_instance(Rng(0, (k,)))
        assert x.shape[1] <= 16 and x.shape[2] <= 4 and A.shape[1] <= 4
        assert np.all(delta > 0) and np.all(A < 0)
        e, labels, tau = V.random_anatomy_batch(Rng(1, (k,)))
        _, counts = np.unique(labels, return_counts=True)
        assert counts.min() >= 2 and np.allclose(np.linalg.norm(e, axis=1), 1.0)


@pytest.mark.parametrize("name", ["scan", "losses", "sampler"])
def test_fast_suites_pass(name):
    (res,) = V.run_suites([name])
    assert res.passed, res.line()
    assert res.max_error < res.tolerance


def test_projector_suite_small():
    rel, fbp_psnr = V.projector_errors(size=64, n_views=90)
    assert rel < 0.05 and fbp_psnr > 20


def test_fault_detected_by_gradient_suite():
    res = V.suite_gradients(instances=2)
    assert res.passed
    with corrupt_backward("softplus"):
        res = V.suite_gradients(instances=2)
    assert not res.passed and "softplus" in res.detail


def test_line_format():
    line = V.SuiteResult("scan", True, 1e-15, 1e-12, 0.5).line()
    assert line.startswith("scan") and "PASS" in line and "max_err=1.000e-15" in line


def test_unknown_suite():
    with pytest.raises(ValueError):
        V.run_suites(["nope"])
