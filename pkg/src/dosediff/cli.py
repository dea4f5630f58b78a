"""Command-line entry point: simulate, train both stages, denoise, evaluate, verify.

Exit codes: 0 ok, 1 verification failure, 2 configuration error, 3 data error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import ctsim, fileio
from . import dadiff as D
from . import diffusion as F
from . import perception as P
from .config import ConfigError, RunConfig
from .metrics import MetricReport, plcc, psnr, srocc, ssim
from .numcore import Adam, Rng

log = logging.getLogger(__name__)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
THREADS_ENV = "FOUNDDIFF_THREADS"

# substream keys under Rng(config.seed)
STREAM_TRAIN_SET, STREAM_TEST_SET = 0, 1
STREAM_PERCEPTION = 10
STREAM_DENOISER_INIT, STREAM_DENOISER_DRAWS = 20, 21
STREAM_SAMPLING = 30


class DataError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers


def _load_dataset(directory: Path) -> list[ctsim.CtSample]:
    if not (directory / "manifest.txt").exists():
        raise DataError(f"no dataset at {directory} (run 'simulate' first)")
    try:
        return fileio.read_dataset(directory)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _stack(samples, key: str) -> np.ndarray:
    return np.stack([getattr(s, key) for s in samples]).astype(np.float64)


def _select(samples, fractions) -> list[ctsim.CtSample]:
    keys = {ctsim.fraction_key(f) for f in fractions}
    return [s for s in samples if ctsim.fraction_key(s.y_d) in keys]


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} checkpoint not found at {path}")
    return path


def _copy_config(cfg: RunConfig, out: Path, name: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / name)


def _dtype(cfg: RunConfig):
    return np.dtype(cfg.dtype)


def _load_perception(cfg: RunConfig, out: Path) -> tuple[P.PerceptionModel, dict]:
    model, extra = P.load_perception(_require(cfg.path("perception_ckpt", out), "perception"), dtype=_dtype(cfg))
    centroids = {k.split(".", 1)[1]: v.astype(np.float64) for k, v in extra.items() if k.startswith("centroid.")}
    return model, centroids


def _needs_perception(cfg: RunConfig) -> bool:
    return cfg.use_dose or cfg.use_anatomy


def _schedule_and_plan(cfg: RunConfig):
    return F.build_schedule(cfg.T, cfg.eta), F.make_plan(cfg.T, cfg.sample_steps, cfg.stochastic_init)


def _write_loss_csv(path: Path, rows: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for step, value in rows:
            w.writerow([step, repr(float(value))])


def _read_loss_csv(path: Path) -> list[tuple[int, float]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


# ------------------------------------------------------------------ commands


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    """Write the training set (all menu fractions) and the test set under ``out``."""
    for key, stream, n in (("train_dir", STREAM_TRAIN_SET, cfg.n_per_cell),
                           ("test_dir", STREAM_TEST_SET, cfg.test_per_cell)):
        try:
            samples = ctsim.make_dataset(cfg.families, cfg.dose_menu, n, cfg.size, cfg.n0, cfg.seed, stream)
        except ValueError as exc:
            raise DataError(f"simulation failed: {exc}") from exc
        manifest = fileio.write_dataset(cfg.path(key, out), samples)
        print(f"wrote {len(samples)} samples, manifest {manifest}")
    _copy_config(cfg, out, "simulate.cfg")
    return EXIT_OK


def cmd_train_perception(cfg: RunConfig, out: Path) -> int:
    samples = _load_dataset(cfg.path("train_dir", out))
    images = _stack(samples, "ldct")
    y_d = np.array([s.y_d for s in samples])
    anatomy = np.array([s.anatomy for s in samples])
    pcfg = P.PerceptionConfig(d_e=cfg.d_e, tau=cfg.tau, epochs=cfg.perception_epochs, batch_size=cfg.perception_batch,
                              lr=cfg.perception_lr, lr_min=cfg.perception_lr_min, crop_fraction=cfg.crop_fraction,
                              dtype=cfg.dtype)
    rows: list[tuple[int, float]] = []
    try:
        model, _ = P.train_perception(pcfg, images, y_d, anatomy, Rng(cfg.seed).substream(STREAM_PERCEPTION),
                                      callback=lambda step, v: rows.append((step, v)))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    finally:
        out.mkdir(parents=True, exist_ok=True)
        _write_loss_csv(out / "perception_loss.csv", rows)
    enc = P.encode(model, images)
    centroids = P.class_centroids(enc.e_a, anatomy)
    P.save_perception(cfg.path("perception_ckpt", out), model,
                      {f"centroid.{k}": v.astype(np.float32) for k, v in centroids.items()})
    _copy_config(cfg, out, "train-perception.cfg")
    stats = P.eval_perception(model, images, y_d, anatomy, centroids)
    print("perception train-set " + " ".join(f"{k}={v:.4f}" for k, v in stats.items()))
    return EXIT_OK


def cmd_train_denoiser(cfg: RunConfig, out: Path, resume: bool = False, until: int | None = None) -> int:
    """Train on ``train_doses`` with a frozen perception model; checkpoints allow exact resumption.

    ``until`` stops after that many total steps (the schedule still spans ``denoiser_steps``).
    """
    perception = _load_perception(cfg, out)[0] if _needs_perception(cfg) else None
    samples = _select(_load_dataset(cfg.path("train_dir", out)), cfg.train_doses)
    if not samples:
        raise DataError("training set holds no samples at the configured train_doses")
    nd, ld = _stack(samples, "ndct"), _stack(samples, "ldct")
    sched, _ = _schedule_and_plan(cfg)
    cond = F.condition(perception, ld, cfg.d_e)
    ckpt = cfg.path("denoiser_ckpt", out)
    loss_path = out / "denoiser_loss.csv"
    tcfg = F.TrainConfig(steps=cfg.denoiser_steps, batch_size=cfg.denoiser_batch, patch=cfg.patch,
                         lr=cfg.denoiser_lr, lr_min=cfg.denoiser_lr_min, log_every=0)
    start, opt = 0, None
    if resume:
        net, extra = D.load_denoiser(_require(ckpt, "denoiser"), dtype=_dtype(cfg))
        start = int(extra["train.step"][0])
        opt = Adam(net.parameters(), tcfg.lr)
        opt.load_state({k[4:]: v for k, v in extra.items() if k.startswith("opt.")})
        rows = [r for r in _read_loss_csv(loss_path) if r[0] < start]
    else:
        dcfg = D.DenoiserConfig(cfg.widths, cfg.n_state, cfg.d_e, cfg.scan_directions, cfg.use_dose, cfg.use_anatomy)
        net = D.DenoiserNet(dcfg, Rng(cfg.seed).substream(STREAM_DENOISER_INIT), dtype=_dtype(cfg))
        rows = []
    _copy_config(cfg, out, "train-denoiser.cfg")
    draws = Rng(cfg.seed).substream(STREAM_DENOISER_DRAWS)
    step = start
    end = cfg.denoiser_steps if until is None else min(until, cfg.denoiser_steps)
    while step < end:
        stop = min(end, (step // cfg.checkpoint_every + 1) * cfg.checkpoint_every)
        try:
            opt, trace = F.train_denoiser(net, nd, ld, cond, sched, tcfg, draws, opt, start_step=step, stop_step=stop)
        except P.DivergenceError:
            _write_loss_csv(loss_path, rows)
            raise
        rows.extend(zip(range(step, stop), trace))
        step = stop
        extra = {f"opt.{k}": v for k, v in opt.state().items()}
        extra["train.step"] = np.array([step], dtype=np.float32)
        D.save_denoiser(ckpt, net, extra)
        _write_loss_csv(loss_path, rows)
        print(f"denoiser step {step}/{cfg.denoiser_steps} loss {np.mean(trace):.4e}")
    return EXIT_OK


def _read_inputs(paths: list[Path]) -> tuple[list[str], np.ndarray]:
    names, images = [], []
    for path in paths:
        if path.is_dir():
            for s, (fname, _, _) in zip(_load_dataset(path), fileio.read_manifest(path)):
                names.append(Path(fname).stem)
                images.append(s.ldct)
        elif path.suffix == ".npy":
            arr = np.load(path)
            if arr.ndim == 2:
                names.append(path.stem)
                images.append(arr)
            elif arr.ndim == 3:
                names.extend(f"{path.stem}_{i}" for i in range(arr.shape[0]))
                images.extend(arr)
            else:
                raise DataError(f"{path}: expected a 2-D or 3-D array, got shape {arr.shape}")
        elif path.suffix == ".cts":
            names.append(path.stem)
            images.append(fileio.read_sample(path).ldct)
        else:
            raise DataError(f"{path}: unsupported input (use .npy, .cts or a dataset directory)")
    if not images:
        raise DataError("no input images")
    shapes = {np.shape(im) for im in images}
    if len(shapes) != 1:
        raise DataError(f"input images differ in shape: {sorted(shapes)}")
    return names, np.stack(images).astype(np.float64)


def _load_denoiser(cfg: RunConfig, out: Path):
    net, _ = D.load_denoiser(_require(cfg.path("denoiser_ckpt", out), "denoiser"), dtype=_dtype(cfg))
    perception = _load_perception(cfg, out)[0] if (net.cfg.use_dose or net.cfg.use_anatomy) else None
    return net, perception


def cmd_denoise(cfg: RunConfig, out: Path, inputs: list[Path]) -> int:
    net, perception = _load_denoiser(cfg, out)
    missing = [str(p) for p in inputs if not p.exists()]
    if missing:
        raise DataError(f"inputs not found: {missing}")
    try:
        names, images = _read_inputs(inputs)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    sched, plan = _schedule_and_plan(cfg)
    evaluations = np.zeros(images.shape[0], dtype=int)
    batch = cfg.denoiser_batch

    def count(first: int, t) -> None:
        evaluations[first : first + batch] += 1

    try:
        result = F.denoise(net, perception, images, plan, sched, Rng(cfg.seed).substream(STREAM_SAMPLING),
                           batch_size=batch, hook=count)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    dest = out / "denoised"
    dest.mkdir(parents=True, exist_ok=True)
    for name, img in zip(names, result):
        np.save(dest / f"{name}.npy", img.astype(np.float32))
        fileio.write_pgm16(dest / f"{name}.pgm", img)
    report = {
        "images": len(names),
        "sample_steps": plan.step_count,
        "timesteps": [int(t) for t in plan.timesteps],
        "network_evaluations": {n: int(e) for n, e in zip(names, evaluations)},
    }
    (out / "denoise_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"denoised {len(names)} images into {dest} ({plan.step_count} network evaluations each)")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    """Per-sample PSNR/SSIM of input and output, plus perception metrics per dose split."""
    samples = _load_dataset(cfg.path("test_dir", out))
    net, _ = D.load_denoiser(_require(cfg.path("denoiser_ckpt", out), "denoiser"), dtype=_dtype(cfg))
    perception, centroids = _load_perception(cfg, out)
    sched, plan = _schedule_and_plan(cfg)
    names = [Path(n).stem for n, _, _ in fileio.read_manifest(cfg.path("test_dir", out))]
    nd, ld = _stack(samples, "ndct"), _stack(samples, "ldct")
    y_d = np.array([s.y_d for s in samples])
    anatomy = np.array([s.anatomy for s in samples])
    try:
        den = F.denoise(net, perception if (net.cfg.use_dose or net.cfg.use_anatomy) else None, ld, plan, sched,
                        Rng(cfg.seed).substream(STREAM_SAMPLING), batch_size=cfg.denoiser_batch)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    report = MetricReport()
    for i, name in enumerate(names):
        for metric, value in (("psnr_input", psnr(ld[i], nd[i])), ("psnr", psnr(den[i], nd[i])),
                              ("ssim_input", ssim(ld[i], nd[i])), ("ssim", ssim(den[i], nd[i]))):
            report.add(name, metric, value, y_d[i], anatomy[i])

    splits = {"seen": cfg.train_doses, "unseen": cfg.unseen_doses}
    summary: dict = {"splits": {}, "perception": {}, "missing_cells": []}
    enc = P.encode(perception, ld)
    for split, fractions in splits.items():
        keys = {ctsim.fraction_key(f) for f in fractions}
        mask = np.array([ctsim.fraction_key(v) in keys for v in y_d])
        for f in fractions:
            for fam in cfg.families:
                if not np.any((np.abs(y_d - f) < 1e-9) & (anatomy == fam)):
                    summary["missing_cells"].append({"split": split, "dose": f, "anatomy": fam})
        if not mask.any():
            summary["splits"][split] = None
            summary["perception"][split] = None
            continue
        gain = [psnr(den[i], nd[i]) - psnr(ld[i], nd[i]) for i in np.flatnonzero(mask)]
        summary["splits"][split] = {"count": int(mask.sum()), "psnr_gain_mean": float(np.mean(gain)),
                                    "doses": [float(f) for f in fractions]}
        stats = {"anatomy_acc": float(np.mean(P.nearest_centroid(enc.e_a[mask], centroids) == anatomy[mask]))
                 if centroids else None}
        if np.unique(y_d[mask]).size > 1:
            stats["plcc"] = plcc(enc.y_hat[mask], y_d[mask])
            stats["srocc"] = srocc(enc.y_hat[mask], y_d[mask])
        summary["perception"][split] = stats
    report.write_csv(out / "evaluation.csv")
    report.write_json(out / "evaluation.json", summary)
    for split, s in summary["splits"].items():
        if s is not None:
            print(f"{split}: n={s['count']} mean PSNR gain {s['psnr_gain_mean']:+.2f} dB")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out: Path, suites=None, fault: str | None = None) -> int:
    from .numcore import EXTRA_OP_KINDS, OP_KINDS
    from .verify import SUITES, run_suites

    if fault is not None and fault not in OP_KINDS + EXTRA_OP_KINDS:
        raise ConfigError(f"unknown op for fault injection: {fault}")
    unknown = [s for s in suites or [] if s not in SUITES]
    if unknown:
        raise ConfigError(f"unknown suites {unknown}; choose from {sorted(SUITES)}")
    results = run_suites(suites, seed=cfg.seed, fault=fault)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED suites: {', '.join(failed)}")
        return EXIT_VERIFY
    print("all suites passed")
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, default=Path("run"), help="output directory (default: run)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    parser = argparse.ArgumentParser(prog="dosediff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate train and test datasets")
    sub.add_parser("train-perception", parents=[common], help="train the dose/anatomy perception model")
    p = sub.add_parser("train-denoiser", parents=[common], help="train the residual diffusion denoiser")
    p.add_argument("--resume", action="store_true", help="continue from the denoiser checkpoint")
    p.add_argument("--until", type=int, metavar="STEP", help="stop (with a checkpoint) once STEP steps are done")
    p = sub.add_parser("denoise", parents=[common], help="denoise .npy/.cts images or dataset directories")
    p.add_argument("inputs", nargs="+", type=Path)
    sub.add_parser("evaluate", parents=[common], help="score the test set per dose/anatomy cell")
    p = sub.add_parser("verify", parents=[common], help="run the self-check suites")
    p.add_argument("--suite", action="append", dest="suites", help="run only this suite (repeatable)")
    p.add_argument("--inject-fault", dest="fault", help=argparse.SUPPRESS)
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    return out


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.config is not None and not args.config.exists():
            raise ConfigError(f"config file not found: {args.config}")
        cfg = RunConfig.load(args.config, _overrides(args))
        with _thread_limit():
            if args.command == "simulate":
                return cmd_simulate(cfg, args.out)
            if args.command == "train-perception":
                return cmd_train_perception(cfg, args.out)
            if args.command == "train-denoiser":
                return cmd_train_denoiser(cfg, args.out, args.resume, args.until)
            if args.command == "denoise":
                return cmd_denoise(cfg, args.out, args.inputs)
            if args.command == "evaluate":
                return cmd_evaluate(cfg, args.out)
            return cmd_verify(cfg, args.out, args.suites, args.fault)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, fileio.FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except P.DivergenceError as exc:
        print(f"training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
