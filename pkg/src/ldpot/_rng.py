"""Seeded random streams.

Every stochastic routine in the package draws from a Philox-4x64
counter-based generator keyed by ``(seed, stream name)``.  Two calls with the
same pair produce bit-identical draws on every platform numpy supports, and
different stream names ("data", "noise", "latent", "init", "batch", ...) are
statistically independent, so one component can be varied without
perturbing the others.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int | None, name: str) -> np.random.Generator:
    """Return the generator for stream ``name`` under the global ``seed``.

    ``seed=None`` is treated as 0 so that omitted seeds stay reproducible.
    """
    seed = 0 if seed is None else int(seed)
    ss = np.random.SeedSequence([seed & _MASK64, _stream_key(name)])
    return np.random.Generator(np.random.Philox(ss))


def open_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws on the open interval (0, 1).

    Uses 53 random bits per value and offsets by half an ulp so neither end
    point can occur; inverse-CDF transforms stay finite.
    """
    k = rng.integers(0, 1 << 53, size=shape, dtype=np.int64)
    return (k.astype(np.float64) + 0.5) * (2.0**-53)
