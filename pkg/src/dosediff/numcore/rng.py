"""Seeded random streams."""

from __future__ import annotations

import numpy as np

_POISSON_INVERSION_LIMIT = 30.0


class Rng:
    """Deterministic generator (PCG64) with named substreams.

    Every random draw in the package flows through an instance of this class;
    two instances built from the same seed and key produce identical streams.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def substream(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def poisson(self, lam) -> np.ndarray:
        """Poisson counts.

        Means below 30 use sequential-search inversion of a uniform draw;
        larger means use the rounded normal approximation clamped at 0.
        """
        lam = np.asarray(lam, dtype=np.float64)
        out = np.zeros(lam.shape, dtype=np.float64)
        small = lam < _POISSON_INVERSION_LIMIT
        u = self._gen.uniform(size=lam.shape)
        z = self._gen.normal(size=lam.shape)
        if np.any(small):
            ls = lam[small]
            us = u[small]
            k = np.zeros_like(ls)
            p = np.exp(-ls)
            cdf = p.copy()
            active = us > cdf
            while np.any(active):
                k[active] += 1
                p[active] *= ls[active] / k[active]
                cdf[active] += p[active]
                # guard against cdf saturating below u through rounding
                active = active & (us > cdf) & (p > 0)
            out[small] = k
        big = ~small
        if np.any(big):
            lb = lam[big]
            out[big] = np.maximum(np.rint(lb + np.sqrt(lb) * z[big]), 0.0)
        return out
