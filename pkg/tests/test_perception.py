import math

import numpy as np
import pytest

from dosediff import perception as P
from dosediff.metrics import plcc, srocc
from dosediff.numcore import Rng, Tensor, grad_check, ops, parameter
from dosediff.verify import anatomy_loss_reference as anatomy_loss_bruteforce
from dosediff.verify import rank_loss_reference as rank_loss_bruteforce


def unit(rng, n, d):
    e = rng.normal(size=(n, d))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------- dose score


def test_dose_score_symmetric_is_half():
    e = np.array([1.0, 0.0])
    assert P.dose_score(T(e), T([0.3, 1.0]), T([0.3, -1.0])).item() == pytest.approx(0.5)


def test_dose_score_direct_value():
    e = np.array([1.0, 0.0])
    val = P.dose_score(T(e), T([1.0, 0.0]), T([-1.0, 0.0])).item()
    assert val == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-12)


def test_dose_score_complement():
    rng = Rng(1)
    e, a, b = rng.normal(size=(3, 5))
    s1 = P.dose_score(T(e), T(a), T(b)).item()
    s2 = P.dose_score(T(e), T(b), T(a)).item()
    assert s1 + s2 == pytest.approx(1.0, abs=1e-15)


def test_dose_score_monotone_in_clean_alignment():
    e = np.array([1.0, 0.0, 0.0])
    noisy = T([0.0, 0.0, 1.0])
    vals = [P.dose_score(T(e), T([c, 1.0, 0.0]), noisy).item() for c in np.linspace(-2, 2, 9)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_dose_score_dim_mismatch():
    with pytest.raises(ValueError):
        P.dose_score(T([1.0, 0.0]), T([1.0, 0.0, 0.0]), T([0.0, 1.0, 0.0]))


# ---------------------------------------------------------------- losses


def test_loss_dose_examples():
    assert P.loss_dose(T([0.5]), [0.25]).item() == pytest.approx(0.0625)
    assert P.loss_dose(T([0.1, 0.4]), [0.1, 0.4]).item() == 0.0


def test_loss_dose_gradient():
    y = np.array([0.1, 0.3, 0.7])
    assert grad_check(lambda yh: P.loss_dose(yh, y), [parameter(Rng(2).uniform(size=3))]) < 1e-6


def test_rank_loss_two_samples_zero():
    e = unit(Rng(0), 2, 4)
    assert P.loss_rank(T(e), [0.1, 0.5], 0.1).item() == pytest.approx(0.0, abs=1e-15)


def test_rank_loss_four_point_example():
    e = [[1, 0], [0, 1], [-1, 0], [0, -1]]
    y = [0.05, 0.10, 0.25, 0.50]
    assert P.loss_rank(T(e), y, 1.0).item() == pytest.approx(rank_loss_bruteforce(e, y, 1.0), abs=1e-10)


@pytest.mark.parametrize("seed", range(50))
def test_rank_loss_matches_bruteforce(seed):
    rng = Rng(seed)
    n = int(rng.integers(2, 5)) * 2
    e = unit(rng, n, int(rng.integers(2, 9)))
    # draws from a small menu so ties occur
    y = rng.generator.choice([0.05, 0.1, 0.25, 0.5, 1.0], size=n)
    tau = float(rng.uniform(0.05, 1.0))
    got = P.loss_rank(T(e), y, tau).item()
    assert got == pytest.approx(rank_loss_bruteforce(e.tolist(), y.tolist(), tau), abs=1e-10)


def test_rank_loss_translation_and_rotation_invariant():
    rng = Rng(4)
    e = unit(rng, 6, 3)
    y = np.array([0.125, 0.25, 0.25, 0.5, 0.75, 0.875])
    base = P.loss_rank(T(e), y, 0.2).item()
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    assert P.loss_rank(T(e @ q), y, 0.2).item() == pytest.approx(base, abs=1e-12)
    assert P.loss_rank(T(e), y + 3.0, 0.2).item() == pytest.approx(base, abs=1e-12)


def test_rank_loss_nonnegative():
    for seed in range(10):
        rng = Rng(100 + seed)
        e = unit(rng, 6, 4)
        assert P.loss_rank(T(e), rng.uniform(size=6), 0.1).item() >= 0


def test_anatomy_loss_identical_pair_zero():
    e = [[0.6, 0.8], [0.6, 0.8]]
    assert P.loss_anatomy(T(e), ["a", "a"], 0.5).item() == pytest.approx(0.0, abs=1e-15)


def test_anatomy_loss_three_point_example():
    e = [[1, 0], [0, 1], [-1, 0]]
    labels = ["a", "a", "b"]
    # class b has no positive, so the example uses a 4th b sample to make the batch valid
    with pytest.raises(ValueError, match="no positive"):
        P.loss_anatomy(T(e), labels, 1.0)
    e4 = e + [[0, -1]]
    labels4 = labels + ["b"]
    assert P.loss_anatomy(T(e4), labels4, 1.0).item() == pytest.approx(
        anatomy_loss_bruteforce(e4, labels4, 1.0), abs=1e-10)


@pytest.mark.parametrize("seed", range(50))
def test_anatomy_loss_matches_bruteforce(seed):
    rng = Rng(1000 + seed)
    n = int(rng.integers(2, 6)) * 2
    labels = np.repeat(["head", "chest", "abdomen"][: max(1, n // 3)], 2)[:n]
    labels = np.concatenate([labels, np.repeat(labels[:1], n - labels.size)])
    labels = labels[rng.permutation(n)]
    e = unit(rng, n, int(rng.integers(2, 9)))
    tau = float(rng.uniform(0.05, 1.0))
    got = P.loss_anatomy(T(e), labels, tau).item()
    assert got == pytest.approx(anatomy_loss_bruteforce(e.tolist(), labels.tolist(), tau), abs=1e-10)


def test_anatomy_loss_permutation_invariant():
    rng = Rng(7)
    e = unit(rng, 6, 3)
    labels = np.array(list("aabbcc"))
    p = rng.permutation(6)
    assert P.loss_anatomy(T(e[p]), labels[p], 0.3).item() == pytest.approx(
        P.loss_anatomy(T(e), labels, 0.3).item(), abs=1e-12)


def test_loss_total_is_sum():
    rng = Rng(8)
    ed, ea = unit(rng, 4, 3), unit(rng, 4, 3)
    yh = rng.uniform(size=4)
    y = [0.1, 0.5, 0.1, 0.5]
    a = ["x", "y", "x", "y"]
    total = P.loss_total(T(ed), T(ea), T(yh), y, a, 0.1).item()
    parts = (P.loss_dose(T(yh), y).item() + P.loss_rank(T(ed), y, 0.1).item()
             + P.loss_anatomy(T(ea), a, 0.1).item())
    assert total == parts


def test_loss_gradients():
    rng = Rng(9)
    y = [0.1, 0.25, 0.1, 0.25]
    a = ["x", "y", "x", "y"]
    fn = lambda e: P.loss_rank(ops.l2_normalize(e), y, 0.5)
    assert grad_check(fn, [parameter(rng.normal(size=(4, 3)))]) < 1e-6
    fn = lambda e: P.loss_anatomy(ops.l2_normalize(e), a, 0.5)
    assert grad_check(fn, [parameter(rng.normal(size=(4, 3)))]) < 1e-6


def test_total_objective_gradient_wrt_model_parameters():
    model = P.PerceptionModel(d_e=4, rng=Rng(3))
    x = P._prep(Rng(4).uniform(size=(4, 16, 16)), np.float64)
    y = [0.1, 0.5, 0.1, 0.5]
    a = ["x", "y", "x", "y"]

    def objective(*_):
        e_d, e_a, y_hat = model(x)
        return P.loss_total(e_d, e_a, y_hat, y, a, 0.1)

    err = grad_check(objective, model.parameters(), max_elements=8, rng=np.random.default_rng(5))
    assert err < 1e-4


# ---------------------------------------------------------------- model / training


def test_encode_contract():
    model = P.PerceptionModel(d_e=8, rng=Rng(0))
    img = Rng(1).uniform(size=(1, 24, 24))
    out = P.encode(model, np.concatenate([img, img, Rng(2).uniform(size=(1, 24, 24))]))
    np.testing.assert_array_equal(out.e_d[0], out.e_d[1])
    np.testing.assert_allclose(np.linalg.norm(out.e_d, axis=1), 1, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(out.e_a, axis=1), 1, atol=1e-6)
    assert np.all((out.y_hat > 0) & (out.y_hat < 1))


def test_encode_rejects_small_and_nonfinite():
    model = P.PerceptionModel(d_e=8, rng=Rng(0))
    with pytest.raises(ValueError):
        P.encode(model, np.zeros((1, 8, 8)))
    with pytest.raises(ValueError):
        P.encode(model, np.full((1, 16, 16), np.nan))


def test_encode_nonfinite_activation_names_layer():
    model = P.PerceptionModel(d_e=8, rng=Rng(0))
    model.encoder[2].weight.data[:] = np.inf
    with pytest.raises(FloatingPointError, match="layer 2"):
        P.encode(model, Rng(1).uniform(size=(1, 32, 32)))


def test_anchors_start_distinct():
    model = P.PerceptionModel(rng=Rng(0))
    c, n = model.e_clean.data, model.e_noisy.data
    assert c @ n / (np.linalg.norm(c) * np.linalg.norm(n)) < 0.99


def test_two_view_batch_layout():
    imgs = Rng(0).uniform(size=(3, 32, 32))
    views = P.two_view_batch(imgs, 0.75, Rng(1))
    side = round(32 * math.sqrt(0.75))
    assert views.shape == (6, side, side)


def _tiny_data(n=8):
    rng = Rng(5)
    imgs = rng.uniform(size=(n, 32, 32)) * 0.2 + 0.3
    y = np.tile([0.5, 0.1], n // 2)
    imgs += rng.normal(size=imgs.shape) * (0.05 / np.sqrt(y))[:, None, None] * 0.1
    a = np.repeat(["head", "chest"], n // 2)
    return imgs, y, a


def test_train_smoke_and_determinism():
    imgs, y, a = _tiny_data()
    cfg = P.PerceptionConfig(d_e=8, epochs=1, batch_size=4)
    m1, t1 = P.train_perception(cfg, imgs, y, a, Rng(11))
    m2, t2 = P.train_perception(cfg, imgs, y, a, Rng(11))
    assert len(t1) == 1 and all(np.isfinite(t1))
    assert t1 == t2
    for (k, p), (_, q) in zip(m1.named_parameters(), m2.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=k)


def test_train_trace_decreases_when_smoothed():
    imgs, y, a = _tiny_data(16)
    cfg = P.PerceptionConfig(d_e=8, epochs=15, batch_size=8)
    _, trace = P.train_perception(cfg, imgs, y, a, Rng(12))
    smooth = np.convolve(trace, np.ones(5) / 5, mode="valid")
    assert smooth[-1] < smooth[0]


def test_train_requires_two_doses_and_anatomies():
    imgs, y, a = _tiny_data()
    with pytest.raises(ValueError):
        P.train_perception(P.PerceptionConfig(epochs=1), imgs, np.full(8, 0.5), a, Rng(0))
    with pytest.raises(ValueError):
        P.train_perception(P.PerceptionConfig(epochs=1), imgs, y, np.full(8, "head"), Rng(0))


def test_train_divergence_reports_epoch():
    imgs, y, a = _tiny_data()
    cfg = P.PerceptionConfig(d_e=8, epochs=2, batch_size=4, lr=1e200, clip_norm=1e300)
    with pytest.raises(P.DivergenceError, match="epoch"):
        P.train_perception(cfg, imgs, y, a, Rng(0))


def test_eval_metric_conventions():
    y = np.array([0.05, 0.1, 0.25, 0.5])
    assert plcc(y, y) == pytest.approx(1) and srocc(1 - y, y) == pytest.approx(-1)
    e = unit(Rng(0), 3, 4)
    cents = P.class_centroids(e, ["a", "b", "c"])
    assert np.all(P.nearest_centroid(e, cents) == np.array(["a", "b", "c"]))


def test_checkpoint_and_csv(tmp_path):
    model = P.PerceptionModel(d_e=8, rng=Rng(0))
    P.save_perception(tmp_path / "p.ckpt", model, {"centroid.head": np.ones(8)})
    back, extra = P.load_perception(tmp_path / "p.ckpt")
    imgs = Rng(1).uniform(size=(2, 16, 16))
    np.testing.assert_allclose(P.encode(back, imgs).y_hat, P.encode(model.astype(np.float32).astype(np.float64), imgs).y_hat, atol=1e-6)
    assert "centroid.head" in extra
    out = P.encode(model, imgs)
    P.export_embeddings_csv(tmp_path / "e.csv", out, [0.5, 0.1], ["head", "chest"])
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].split(",")[:3] == ["sample_id", "y_d", "anatomy"]
    assert len(lines[1].split(",")) == 3 + 16


def test_estimator_api():
    imgs, y, a = _tiny_data()
    est = P.DosePerception(d_e=8, epochs=2, batch_size=4)
    assert est.get_params()["d_e"] == 8
    est.fit(imgs, y, anatomy=a)
    assert est.predict(imgs).shape == (8,)
    assert est.transform(imgs).shape == (8, 16)
    assert set(est.predict_anatomy(imgs)) <= {"head", "chest"}
    with pytest.raises(Exception):
        P.DosePerception().predict(imgs)
