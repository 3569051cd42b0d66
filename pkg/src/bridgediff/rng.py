"""Counter-based random streams with deterministic, splittable children.

All randomness in the package flows through :class:`Rng`. The underlying
generator is Philox (counter-based), so a given 64-bit seed produces the
same raw 64-bit word stream on every platform. Gaussians are produced by
Box-Muller on top of that stream rather than by a library routine, which
keeps sample values stable across library versions.
"""

from __future__ import annotations

import hashlib

import numpy as np

_INV_2_53 = 2.0 ** -53
_INV_2_64 = 2.0 ** -64


def _derive_seed(seed: int, label: str) -> int:
    h = hashlib.blake2b(seed.to_bytes(8, "little") + label.encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Deterministic random stream. Children derived from (seed, label) are
    independent streams; the same seed and label sequence always reproduces
    the same values."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(key=self.seed)

    def child(self, label: str) -> "Rng":
        """Derive an independent stream keyed by ``label``."""
        return Rng(_derive_seed(self.seed, label))

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words (uint64)."""
        return self._bitgen.random_raw(n)

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform f64 samples in [0, 1)."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> 11).astype(np.float64) * _INV_2_53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def _uniform_open(self, n: int) -> np.ndarray:
        # in (0, 1]: safe for log()
        return (self.raw(n).astype(np.float64) + 1.0) * _INV_2_64

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normal samples via Box-Muller."""
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u1 = self._uniform_open(pairs)
        u2 = (self.raw(pairs) >> 11).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray | int:
        """Integers in [low, high). Uses the uniform stream; the modulo-free
        scaling bias is negligible for the small ranges used here."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        span = high - low
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> 11).astype(np.float64) * _INV_2_53
        vals = low + np.minimum((u * span).astype(np.int64), span - 1)
        if size is None:
            return int(vals[0])
        return vals.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic random permutation of range(n)."""
        return np.argsort(self.uniform(n), kind="stable")

    def gamma(self, shape: float, size=None) -> np.ndarray | float:
        """Gamma(shape, 1) samples for shape >= 1 (Marsaglia-Tsang squeeze).

        Rejection rounds consume the stream in a fixed order, so output is
        deterministic for a given seed.
        """
        if shape < 1.0:
            raise ValueError("gamma() requires shape >= 1")
        n = 1 if size is None else int(np.prod(size))
        d = shape - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(n, dtype=np.float64)
        pending = np.arange(n)
        while pending.size:
            k = pending.size
            x = np.asarray(self.normal(k))
            v = (1.0 + c * x) ** 3
            u = self._uniform_open(k)
            ok = (v > 0) & (np.log(u) < 0.5 * x * x + d - d * v + d * np.where(v > 0, np.log(np.where(v > 0, v, 1.0)), 0.0))
            out[pending[ok]] = d * v[ok]
            pending = pending[~ok]
        if size is None:
            return float(out[0])
        return out.reshape(size)
