"""Synthetic low-dose CT: ellipse phantoms, parallel-beam projection,
photon-count noise and filtered backprojection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.signal import fftconvolve

from .numcore import Rng

FAMILIES = ("abdomen", "chest", "head")
DOSE_MENU = (1 / 2, 1 / 3, 1 / 4, 1 / 5, 1 / 6, 1 / 8, 1 / 10, 1 / 20)
SEEN_DOSES = (1 / 2, 1 / 4, 1 / 6, 1 / 10)
UNSEEN_DOSES = (1 / 3, 1 / 5, 1 / 8, 1 / 20)

# attenuation of the body ellipse; anchors the HU scale so body tissue sits at 0 HU
MU_WATER = 2.0
HU_WINDOW = (-1000.0, 2000.0)
DEFAULT_N0 = 1e5
PHOTON_FLOOR = 10.0


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    rho: float


@dataclass
class EllipsePhantom:
    ellipses: list[Ellipse]
    family: str

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        for e in self.ellipses:
            if e.a <= 0 or e.b <= 0:
                raise ValueError("semi-axes must be positive")
            if math.hypot(e.cx, e.cy) + max(e.a, e.b) > 1.0 + 1e-12:
                raise ValueError(f"ellipse {e} leaves the unit disk")

    def attenuation(self, x, y) -> np.ndarray:
        """Summed density of all ellipses containing the points (x, y)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        out = np.zeros(np.broadcast(x, y).shape)
        for e in self.ellipses:
            out += e.rho * _inside(e, x, y)
        return np.where(x * x + y * y <= 1.0, out, 0.0)


def _inside(e: Ellipse, x, y) -> np.ndarray:
    c, s = math.cos(e.theta), math.sin(e.theta)
    dx, dy = x - e.cx, y - e.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0


@dataclass(frozen=True)
class ScanGeometry:
    n_views: int
    n_detectors: int
    detector_spacing: float

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.n_detectors % 2 == 0:
            raise ValueError("n_detectors must be odd so a central ray exists")
        if self.n_detectors * self.detector_spacing < 2.0 - 1e-12:
            raise ValueError("detector span must cover the unit disk")

    @classmethod
    def for_size(cls, size: int, n_views: int | None = None) -> "ScanGeometry":
        """Detector pitch equal to the pixel width, one bin wider than the image."""
        n_det = size + 1 if size % 2 == 0 else size + 2
        return cls(n_views or 2 * size, n_det, 2.0 / size)

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_views) * (math.pi / self.n_views)

    @property
    def positions(self) -> np.ndarray:
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2) * self.detector_spacing


@dataclass
class CtSample:
    ndct: np.ndarray
    ldct: np.ndarray
    y_d: float
    anatomy: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ndct.shape != self.ldct.shape:
            raise ValueError("ndct and ldct must share a shape")

    @property
    def residual(self) -> np.ndarray:
        return self.ldct - self.ndct


# ------------------------------------------------------------------ phantoms


def _fits(cx, cy, a, b) -> bool:
    return math.hypot(cx, cy) + max(a, b) <= 1.0


def _contained(inner: Ellipse, outer: Ellipse, margin: float = 0.98) -> bool:
    """Boundary-sampled test that ``inner`` lies inside ``outer`` shrunk by ``margin``."""
    t = np.linspace(0, 2 * math.pi, 96, endpoint=False)
    c, s = math.cos(inner.theta), math.sin(inner.theta)
    u, v = inner.a * np.cos(t), inner.b * np.sin(t)
    x = inner.cx + c * u - s * v
    y = inner.cy + s * u + c * v
    shrunk = Ellipse(outer.cx, outer.cy, outer.a * margin, outer.b * margin, outer.theta, outer.rho)
    return bool(np.all(_inside(shrunk, x, y)))


def _random_inner(rng: Rng, body: Ellipse, size_range, rho_range, scale=0.8, signed=True, tries=200) -> Ellipse:
    """Random ellipse whose centre lies inside a shrunken copy of ``body``."""
    for _ in range(tries):
        r = math.sqrt(rng.uniform()) * scale
        phi = rng.uniform(0, 2 * math.pi)
        u, v = r * body.a * math.cos(phi), r * body.b * math.sin(phi)
        c, s = math.cos(body.theta), math.sin(body.theta)
        cx = body.cx + c * u - s * v
        cy = body.cy + s * u + c * v
        a = rng.uniform(*size_range)
        b = rng.uniform(*size_range)
        sign = 1.0 if not signed or rng.uniform() < 0.5 else -1.0
        e = Ellipse(cx, cy, a, b, rng.uniform(0, math.pi), sign * rng.uniform(*rho_range))
        if _fits(cx, cy, a, b) and _contained(e, body):
            return e
    raise RuntimeError("could not place an inner ellipse")


def make_phantom(family: str, rng: Rng) -> EllipsePhantom:
    """Random phantom with the structure typical of ``family``."""
    mu = MU_WATER
    if family == "abdomen":
        body = Ellipse(rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03),
                       rng.uniform(0.80, 0.92), rng.uniform(0.60, 0.74), rng.uniform(-0.1, 0.1), mu)
        organs = [_random_inner(rng, body, (0.05, 0.22), (0.03 * mu, 0.15 * mu))
                  for _ in range(int(rng.integers(4, 9)))]
        return EllipsePhantom([body, *organs], family)
    if family == "chest":
        body = Ellipse(rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02),
                       rng.uniform(0.84, 0.92), rng.uniform(0.64, 0.74), 0.0, mu)
        ellipses = [body]
        lungs = []
        for side in (-1.0, 1.0):
            while True:
                la, lb = rng.uniform(0.22, 0.28), rng.uniform(0.36, 0.48)
                lx = body.cx + side * rng.uniform(0.34, 0.42)
                ly = body.cy + rng.uniform(-0.04, 0.04)
                lung = Ellipse(lx, ly, la, lb, side * rng.uniform(0.0, 0.15), -0.95 * mu)
                if _contained(lung, body):
                    break
            lungs.append(lung)
        ellipses += lungs
        ellipses.append(Ellipse(body.cx + rng.uniform(-0.05, 0.05), body.cy + rng.uniform(-0.25, -0.15),
                                rng.uniform(0.12, 0.18), rng.uniform(0.10, 0.15), rng.uniform(0, math.pi), 0.05 * mu))
        for _ in range(int(rng.integers(1, 5))):
            lung = lungs[int(rng.integers(0, 2))]
            ellipses.append(_random_inner(rng, lung, (0.02, 0.06), (0.3 * mu, 0.6 * mu), scale=0.6, signed=False))
        return EllipsePhantom(ellipses, family)
    if family == "head":
        a, b = rng.uniform(0.78, 0.88), rng.uniform(0.66, 0.78)
        cx, cy, th = rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), rng.uniform(-0.1, 0.1)
        body = Ellipse(cx, cy, a, b, th, mu)
        skull = rng.uniform(1.5, 1.9) * mu
        thick = rng.uniform(0.05, 0.08)
        ring_out = Ellipse(cx, cy, a, b, th, skull)
        ring_in = Ellipse(cx, cy, a - thick, b - thick, th, -skull)
        inner = Ellipse(cx, cy, a - thick, b - thick, th, 0.0)
        faint = [_random_inner(rng, inner, (0.04, 0.18), (0.01 * mu, 0.05 * mu), scale=0.7)
                 for _ in range(int(rng.integers(2, 6)))]
        return EllipsePhantom([body, ring_out, ring_in, *faint], family)
    raise ValueError(f"unknown family {family!r}")


def pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates of pixel centres; rows index y, columns index x."""
    c = -1.0 + (np.arange(size) + 0.5) * (2.0 / size)
    y, x = np.meshgrid(c, c, indexing="ij")
    return x, y


def rasterize(phantom: EllipsePhantom, size: int) -> np.ndarray:
    if size < 16:
        raise ValueError("size must be >= 16")
    x, y = pixel_centers(size)
    return phantom.attenuation(x, y)


# ------------------------------------------------------------------ projection


def project_analytic(phantom: EllipsePhantom, geometry: ScanGeometry) -> np.ndarray:
    """Exact line integrals of the phantom (n_views x n_detectors)."""
    phi = geometry.angles[:, None]
    s = geometry.positions[None, :]
    sino = np.zeros((geometry.n_views, geometry.n_detectors))
    for e in phantom.ellipses:
        w2 = (e.a * np.cos(phi - e.theta)) ** 2 + (e.b * np.sin(phi - e.theta)) ** 2
        sp = s - (e.cx * np.cos(phi) + e.cy * np.sin(phi))
        inside = sp * sp < w2
        chord = np.where(inside, np.sqrt(np.maximum(w2 - sp * sp, 0.0)), 0.0)
        sino += 2.0 * e.rho * e.a * e.b / w2 * chord
    return sino


def project_numeric(image: np.ndarray, geometry: ScanGeometry, step: float | None = None) -> np.ndarray:
    """Ray-driven projector: bilinear samples along each ray, trapezoidal sum."""
    size = image.shape[0]
    if image.shape != (size, size):
        raise ValueError("image must be square")
    px = 2.0 / size
    step = px / 4 if step is None else float(step)
    if step > px / 2 + 1e-15:
        raise ValueError("step must not exceed half a pixel")
    half = math.sqrt(2.0)
    m = int(math.ceil(2 * half / step))
    u = -half + step * np.arange(m + 1)
    wts = np.full(u.size, step)
    wts[0] = wts[-1] = step / 2
    s = geometry.positions
    sino = np.zeros((geometry.n_views, geometry.n_detectors))
    for v, phi in enumerate(geometry.angles):
        c, sn = math.cos(phi), math.sin(phi)
        x = s[:, None] * c - u[None, :] * sn
        y = s[:, None] * sn + u[None, :] * c
        col = (x + 1.0) / px - 0.5
        row = (y + 1.0) / px - 0.5
        vals = map_coordinates(image, [row.ravel(), col.ravel()], order=1, mode="constant", cval=0.0)
        sino[v] = vals.reshape(x.shape) @ wts
    return sino


# ------------------------------------------------------------------ dose noise


def inject_dose_noise(sino: np.ndarray, fraction: float, N0: float, rng: Rng) -> np.ndarray:
    """Poisson photon counting at ``N0 * fraction`` incident photons per bin."""
    if not 0 < fraction <= 1:
        raise ValueError(f"dose fraction must lie in (0, 1], got {fraction}")
    flux = N0 * fraction
    if flux < PHOTON_FLOOR:
        raise ValueError(f"N0*fraction={flux:g} below the photon floor {PHOTON_FLOOR:g}")
    counts = rng.poisson(flux * np.exp(-sino))
    return -np.log(np.maximum(counts, 1.0) / flux)


# ------------------------------------------------------------------ reconstruction


def ramp_kernel(n_taps: int, spacing: float) -> np.ndarray:
    """Spatial Ram-Lak kernel h[n] for n = -(n_taps//2) .. n_taps//2."""
    n = np.arange(n_taps) - n_taps // 2
    h = np.zeros(n_taps)
    h[n == 0] = 1.0 / (4.0 * spacing**2)
    odd = n % 2 == 1
    h[odd] = -1.0 / (n[odd] * math.pi * spacing) ** 2
    return h


def fbp(sino: np.ndarray, geometry: ScanGeometry, size: int) -> np.ndarray:
    if sino.shape != (geometry.n_views, geometry.n_detectors):
        raise ValueError(f"sinogram {sino.shape} inconsistent with geometry")
    d = geometry.detector_spacing
    nd = geometry.n_detectors
    h = ramp_kernel(2 * nd - 1, d)
    filtered = fftconvolve(sino, h[None, :], mode="full", axes=1)[:, nd - 1 : 2 * nd - 1] * d
    x, y = pixel_centers(size)
    det = np.arange(nd, dtype=np.float64)
    image = np.zeros((size, size))
    for v, phi in enumerate(geometry.angles):
        t = (x * math.cos(phi) + y * math.sin(phi)) / d + (nd - 1) / 2
        image += np.interp(t, det, filtered[v], left=0.0, right=0.0)
    return image * (math.pi / geometry.n_views)


# ------------------------------------------------------------------ windowing


def mu_to_hu(mu):
    return 1000.0 * (np.asarray(mu) - MU_WATER) / MU_WATER


def hu_to_mu(hu):
    return MU_WATER * (1.0 + np.asarray(hu) / 1000.0)


def window(hu, clip: bool = True):
    lo, hi = HU_WINDOW
    out = (np.asarray(hu, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0) if clip else out


def unwindow(v):
    lo, hi = HU_WINDOW
    return np.asarray(v, dtype=np.float64) * (hi - lo) + lo


# ------------------------------------------------------------------ datasets


def fraction_key(fraction: float) -> int:
    return int(round(fraction * 1_000_000))


def parse_fraction(text: str) -> float:
    return float(Fraction(text.strip())) if "/" in text else float(text)


def simulate_sample(family: str, fraction: float, size: int, N0: float, rng: Rng,
                    geometry: ScanGeometry | None = None) -> CtSample:
    geometry = geometry or ScanGeometry.for_size(size)
    phantom = make_phantom(family, rng)
    sino = project_analytic(phantom, geometry)
    noisy = inject_dose_noise(sino, fraction, N0, rng)
    ndct = window(mu_to_hu(fbp(sino, geometry, size)))
    ldct = window(mu_to_hu(fbp(noisy, geometry, size)))
    meta = {"seed": rng.seed, "key": rng.key, "geometry": geometry, "N0": N0}
    return CtSample(ndct.astype(np.float32), ldct.astype(np.float32), float(fraction), family, meta)


def make_dataset(
    families: Sequence[str],
    dose_fractions: Sequence[float],
    n_per_cell: int,
    size: int,
    N0: float = DEFAULT_N0,
    seed: int = 0,
    stream: int = 0,
    geometry: ScanGeometry | None = None,
) -> list[CtSample]:
    """One sample per (family, fraction, index) cell, each from its own substream.

    A cell's content depends only on ``(seed, stream, family, fraction, index)``,
    so subsets of the menus reproduce the same samples.
    """
    if not families or not dose_fractions or n_per_cell < 1:
        raise ValueError("families, dose_fractions and n_per_cell must be non-empty")
    for f in dose_fractions:
        if not 0 < f <= 1:
            raise ValueError(f"dose fraction must lie in (0, 1], got {f}")
        if N0 * f < PHOTON_FLOOR:
            raise ValueError(f"N0*fraction={N0 * f:g} below the photon floor {PHOTON_FLOOR:g}")
    base = Rng(seed)
    out = []
    for family in families:
        fam = FAMILIES.index(family)
        for f in dose_fractions:
            for i in range(n_per_cell):
                rng = base.substream(stream, fam, fraction_key(f), i)
                out.append(simulate_sample(family, f, size, N0, rng, geometry))
    return out
