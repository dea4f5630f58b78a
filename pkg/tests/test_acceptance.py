"""Acceptance criteria 1-11, one test each; every test prints a single PASS/FAIL line."""

import shutil
import time

import numpy as np
import pytest

from dosediff import ctsim
from dosediff import dadiff as D
from dosediff import diffusion as F
from dosediff import perception as P
from dosediff import verify as V
from dosediff.cli import main
from dosediff.metrics import psnr
from dosediff.numcore import Rng, Tensor, grad_check, no_grad, ops, parameter

DESK_N0 = 1e4
SIZE = 64
PERCEPTION_PER_CELL = 40
HELDOUT_PER_CELL = 4
DENOISER_STEPS = 1000
ABLATION_STEPS = 300
ABLATION_SEEDS = (0, 1, 2)


def report(capsys, number: int, name: str, passed: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {number:2d} {name:<22} {'PASS' if passed else 'FAIL'}  {detail}")


def stack(samples, key):
    return np.stack([getattr(s, key) for s in samples]).astype(np.float64)


# ---------------------------------------------------------------- shared desk-scale runs


@pytest.fixture(scope="session")
def desk_data():
    train = ctsim.make_dataset(ctsim.FAMILIES, ctsim.DOSE_MENU, PERCEPTION_PER_CELL, SIZE, DESK_N0, seed=0, stream=0)
    heldout = ctsim.make_dataset(ctsim.FAMILIES, ctsim.DOSE_MENU, HELDOUT_PER_CELL, SIZE, DESK_N0, seed=0, stream=1)
    return train, heldout


@pytest.fixture(scope="session")
def desk_perception(desk_data):
    train, _ = desk_data
    images = stack(train, "ldct")
    anatomy = np.array([s.anatomy for s in train])
    start = time.perf_counter()
    model, trace = P.train_perception(P.PerceptionConfig(), images, [s.y_d for s in train], anatomy, Rng(0))
    seconds = time.perf_counter() - start
    centroids = P.class_centroids(P.encode(model, images).e_a, anatomy)
    return model, centroids, seconds


@pytest.fixture(scope="session")
def desk_denoiser(desk_data, desk_perception):
    train, _ = desk_data
    model = desk_perception[0]
    seen = [s for s in train if ctsim.fraction_key(s.y_d) in {ctsim.fraction_key(f) for f in ctsim.SEEN_DOSES}]
    nd, ld = stack(seen, "ndct"), stack(seen, "ldct")
    sched = F.build_schedule(100, 0.2)
    net = D.DenoiserNet(D.DenoiserConfig(), Rng(1), dtype=np.float32)
    start = time.perf_counter()
    F.train_denoiser(net, nd, ld, F.condition(model, ld), sched, F.TrainConfig(steps=DENOISER_STEPS, log_every=0), Rng(2))
    return net, sched, time.perf_counter() - start


# ---------------------------------------------------------------- criteria


def _perturbed(module, rng, scale=0.1):
    for _, p in module.named_parameters():
        p.data = p.data + rng.normal(scale=scale, size=p.shape)
    return module


def _square(f):
    return lambda x: ops.sum(ops.mul(f(x), f(x)))


def test_criterion_01_gradient_integrity(capsys):
    start = time.perf_counter()
    prims = V.suite_gradients(instances=20)
    rng = Rng(5)
    cfg = D.DenoiserConfig(widths=(4, 8), n_state=3, d_e=6)
    e = Tensor(rng.normal(size=(1, 6)))
    t_emb = Tensor(rng.normal(size=(1, 8)))
    x = parameter(rng.normal(size=(1, 4, 4, 4)))
    rleb = _perturbed(D.RLEB(4, rng), rng)
    cssm = _perturbed(D.CSSM(4, 3, 6, rng), rng)
    ta = _perturbed(D.TransposedAttention(4, rng), rng)
    dacb = _perturbed(D.DACB(4, 8, cfg, rng), rng)
    blocks = {
        "rleb": grad_check(_square(rleb), [x]),
        "cssm": grad_check(_square(lambda f: cssm(f, e)), [x]),
        "attention": grad_check(_square(ta), [x]),
        "dacb": grad_check(_square(lambda f: dacb(f, t_emb, e, e)), [x]),
    }
    net = _perturbed(D.DenoiserNet(D.DenoiserConfig(widths=(4, 8), n_state=2, d_e=6), Rng(0)), rng)
    nd = rng.uniform(0.2, 0.8, (1, 16, 16))
    ld = nd + rng.normal(scale=0.05, size=nd.shape)
    batch = (nd, ld, np.array([6]), rng.normal(size=nd.shape),
             F.Conditioning(rng.normal(size=(1, 6)), rng.normal(size=(1, 6))))
    sched = F.build_schedule(10, 0.2)
    blocks["training_step"] = grad_check(lambda *_: F.training_step(net, batch, sched), net.parameters(),
                                         max_elements=2, rng=np.random.default_rng(0))
    seconds = time.perf_counter() - start
    worst_block = max(blocks.values())
    passed = prims.passed and worst_block < 1e-4 and seconds < 300
    report(capsys, 1, "gradient integrity", passed,
           f"primitives max={prims.max_error:.2e} ({prims.detail}); blocks max={worst_block:.2e}; {seconds:.0f}s")
    assert prims.passed, prims.detail
    assert worst_block < 1e-4, blocks
    assert seconds < 300


def _suite_criterion(capsys, number, name, suite, limit):
    start = time.perf_counter()
    res = suite()
    seconds = time.perf_counter() - start
    passed = res.passed and seconds < limit
    report(capsys, number, name, passed, f"max_err={res.max_error:.2e} tol={res.tolerance:.0e} {res.detail} {seconds:.1f}s")
    assert res.passed, res.line()
    assert seconds < limit


def test_criterion_02_scan_oracle(capsys):
    _suite_criterion(capsys, 2, "scan oracle", V.suite_scan, 10)


def test_criterion_03_loss_oracles(capsys):
    _suite_criterion(capsys, 3, "loss oracles", V.suite_losses, 30)


def test_criterion_04_identity_at_init(capsys):
    start = time.perf_counter()
    rng = Rng(3)
    cfg = D.DenoiserConfig(widths=(8, 16), n_state=3, d_e=6)
    blk = D.DACB(8, 8, cfg, rng)
    f = rng.normal(size=(2, 8, 6, 6))
    with no_grad():
        out = blk(Tensor(f), Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(2, 6))),
                  Tensor(rng.normal(size=(2, 6))))
        dev_block = float(np.max(np.abs(out.data - f)))
        net = D.DenoiserNet(D.DenoiserConfig(), Rng(4), dtype=np.float64)
        x = rng.uniform(size=(2, 32, 32))
        res = net(Tensor(x), Tensor(x), np.array([10, 90]), Tensor(rng.normal(size=(2, 32))),
                  Tensor(rng.normal(size=(2, 32))))
        dev_net = float(np.max(np.abs(res.data)))
    seconds = time.perf_counter() - start
    passed = dev_block == 0.0 and dev_net == 0.0 and seconds < 10
    report(capsys, 4, "identity at init", passed, f"dacb dev={dev_block:g} net out={dev_net:g} {seconds:.1f}s")
    assert dev_block == 0.0 and dev_net == 0.0 and seconds < 10


def test_criterion_05_sampler_exactness(capsys):
    _suite_criterion(capsys, 5, "sampler exactness", V.suite_sampler, 10)


def test_criterion_06_projector_oracle(capsys):
    _suite_criterion(capsys, 6, "projector oracle", lambda: V.suite_projector(size=256), 120)


def test_criterion_07_dose_noise_monotonicity(capsys):
    start = time.perf_counter()
    fractions = (1 / 2, 1 / 4, 1 / 10, 1 / 20)
    means = []
    for f in fractions:
        samples = ctsim.make_dataset(ctsim.FAMILIES, [f], 4, SIZE, seed=7)
        means.append(float(np.mean([psnr(s.ldct, s.ndct) for s in samples])))
    seconds = time.perf_counter() - start
    decreasing = all(a > b for a, b in zip(means, means[1:]))
    passed = decreasing and seconds < 300
    report(capsys, 7, "dose-noise monotonic", passed,
           "PSNR " + " > ".join(f"{m:.2f}" for m in means) + f" dB (12/fraction) {seconds:.0f}s")
    assert decreasing and seconds < 300


def test_criterion_08_perception_desk(capsys, desk_data, desk_perception):
    _, heldout = desk_data
    model, centroids, seconds = desk_perception
    stats = P.eval_perception(model, stack(heldout, "ldct"), [s.y_d for s in heldout],
                              [s.anatomy for s in heldout], centroids)
    passed = stats["srocc"] >= 0.9 and stats["anatomy_acc"] >= 0.95 and seconds <= 1800
    report(capsys, 8, "perception desk", passed,
           f"SROCC={stats['srocc']:.4f} PLCC={stats['plcc']:.4f} anatomy_acc={stats['anatomy_acc']:.3f} "
           f"train {seconds:.0f}s")
    assert stats["srocc"] >= 0.9
    assert stats["anatomy_acc"] >= 0.95
    assert seconds <= 1800


def test_criterion_09_denoiser_desk(capsys, desk_data, desk_perception, desk_denoiser):
    _, heldout = desk_data
    net, sched, seconds = desk_denoiser
    plan = F.make_plan(sched.T, 2)
    gains = {}
    for split, fractions in (("seen", ctsim.SEEN_DOSES), ("unseen", ctsim.UNSEEN_DOSES)):
        keys = {ctsim.fraction_key(f) for f in fractions}
        part = [s for s in heldout if ctsim.fraction_key(s.y_d) in keys]
        nd, ld = stack(part, "ndct"), stack(part, "ldct")
        out = F.denoise(net, desk_perception[0], ld, plan, sched)
        gains[split] = float(np.mean([psnr(o, n) for o, n in zip(out, nd)]) - np.mean([psnr(l, n) for l, n in zip(ld, nd)]))
    passed = gains["seen"] >= 2.0 and gains["unseen"] >= 1.0 and seconds <= 7200
    report(capsys, 9, "denoiser desk", passed,
           f"PSNR gain seen={gains['seen']:+.2f} dB unseen={gains['unseen']:+.2f} dB train {seconds:.0f}s")
    assert gains["seen"] >= 2.0
    assert gains["unseen"] >= 1.0
    assert seconds <= 7200


def test_criterion_10_ablation_ordering(capsys, desk_data, desk_perception):
    train, heldout = desk_data
    model = desk_perception[0]
    keys = {ctsim.fraction_key(f) for f in ctsim.SEEN_DOSES}
    seen = [s for s in train if ctsim.fraction_key(s.y_d) in keys][::2]
    nd, ld = stack(seen, "ndct"), stack(seen, "ldct")
    hnd, hld = stack(heldout, "ndct"), stack(heldout, "ldct")
    cond, hcond = F.condition(model, ld), F.condition(model, hld)
    sched = F.build_schedule(100, 0.2)
    variants = {"full": (True, True), "dose-only": (True, False), "anatomy-only": (False, True)}
    losses = {name: [] for name in variants}
    for seed in ABLATION_SEEDS:
        for name, (use_dose, use_anatomy) in variants.items():
            net = D.DenoiserNet(D.DenoiserConfig(use_dose=use_dose, use_anatomy=use_anatomy), Rng(seed), dtype=np.float32)
            F.train_denoiser(net, nd, ld, cond, sched, F.TrainConfig(steps=ABLATION_STEPS, log_every=0),
                             Rng(100 + seed))
            losses[name].append(F.heldout_loss(net, hnd, hld, hcond, sched, Rng(999)))
    med = {name: float(np.median(v)) for name, v in losses.items()}
    passed = med["full"] <= med["dose-only"] and med["full"] <= med["anatomy-only"]
    report(capsys, 10, "ablation ordering", passed,
           "median held-out loss " + " ".join(f"{k}={v:.4e}" for k, v in med.items()))
    assert med["full"] <= med["dose-only"]
    assert med["full"] <= med["anatomy-only"]


SMOKE = ["--set", "size=32", "--set", "n_per_cell=1", "--set", "test_per_cell=1", "--set", "perception_epochs=2",
         "--set", "perception_batch=8", "--set", "widths=4,8", "--set", "d_e=8", "--set", "denoiser_steps=4",
         "--set", "checkpoint_every=2", "--set", "denoiser_batch=2", "--set", "patch=16",
         "--set", "stochastic_init=true", "--seed", "11"]


def _pipeline(out):
    for cmd in ("simulate", "train-perception", "train-denoiser"):
        assert main([cmd, "--out", str(out), *SMOKE]) == 0
    assert main(["denoise", "--out", str(out), *SMOKE, str(out / "data" / "test")]) == 0
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_criterion_11_determinism(capsys, tmp_path):
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    differing = sorted(k for k in first if first[k] != second.get(k))
    passed = set(first) == set(second) and not differing
    report(capsys, 11, "determinism", passed, f"{len(first)} files compared, differing: {differing or 'none'}")
    shutil.rmtree(tmp_path, ignore_errors=True)
    assert set(first) == set(second)
    assert not differing
