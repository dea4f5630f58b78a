"""Image-quality and correlation metrics plus report writers."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0


def psnr(x, y, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / mse))


def capped(value: float) -> float:
    return PSNR_CAP if math.isinf(value) else value


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = g.size // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")
    return out[half:-half, half:-half]


def ssim(x, y, data_range: float = 1.0, K1: float = 0.01, K2: float = 0.03) -> float:
    """Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < 11:
        raise ValueError(f"ssim needs 2-D images of at least 11x11, got {x.shape}")
    g = _gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def _check_pair(u, v):
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.size != v.size:
        raise ValueError(f"length mismatch {u.size} vs {v.size}")
    if u.size < 2:
        raise ValueError("need at least two observations")
    return u, v


def plcc(u, v) -> float:
    """Pearson linear correlation."""
    u, v = _check_pair(u, v)
    du, dv = u - u.mean(), v - v.mean()
    su, sv = np.sqrt(np.sum(du * du)), np.sqrt(np.sum(dv * dv))
    if su == 0:
        raise ValueError("first argument has zero variance")
    if sv == 0:
        raise ValueError("second argument has zero variance")
    return float(np.clip(np.sum(du * dv) / (su * sv), -1.0, 1.0))


def average_ranks(u) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    u = np.asarray(u, dtype=np.float64).ravel()
    order = np.argsort(u, kind="mergesort")
    sorted_u = u[order]
    ranks = np.empty(u.size)
    i = 0
    while i < u.size:
        j = i
        while j + 1 < u.size and sorted_u[j + 1] == sorted_u[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def srocc(u, v) -> float:
    """Spearman rank-order correlation (Pearson on average ranks)."""
    u, v = _check_pair(u, v)
    if np.all(u == u[0]):
        raise ValueError("first argument is constant; rank correlation undefined")
    if np.all(v == v[0]):
        raise ValueError("second argument is constant; rank correlation undefined")
    return plcc(average_ranks(u), average_ranks(v))


class MetricReport:
    """Per-sample metric rows grouped into (dose, anatomy) cells."""

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, sample_id: str, metric: str, value: float, dose: float, anatomy: str) -> None:
        self.rows.append({"sample_id": sample_id, "metric": metric, "value": float(value),
                          "dose": float(dose), "anatomy": anatomy})

    def cells(self) -> dict[tuple[str, float, str], list[float]]:
        out: dict[tuple[str, float, str], list[float]] = defaultdict(list)
        for r in self.rows:
            out[(r["metric"], r["dose"], r["anatomy"])].append(r["value"])
        return dict(out)

    def summary(self) -> dict:
        cells = []
        for (metric, dose, anatomy), vals in sorted(self.cells().items()):
            arr = np.asarray(vals)
            cells.append({"metric": metric, "dose": dose, "anatomy": anatomy, "count": int(arr.size),
                          "mean": float(arr.mean()), "std": float(arr.std())})
        return {"cells": cells}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "metric", "value", "dose", "anatomy"])
            for r in self.rows:
                w.writerow([r["sample_id"], r["metric"], repr(r["value"]), repr(r["dose"]), r["anatomy"]])

    def write_json(self, path: str | Path, extra: dict | None = None) -> None:
        payload = self.summary()
        if extra:
            payload.update(extra)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
