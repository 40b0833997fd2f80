"""Seeded random streams.

Every stochastic step in the package draws from numpy's PCG64 bit generator.
Streams are derived from a master seed plus integer keys through
``numpy.random.SeedSequence``, so the stream for session 3 of corpus seed 7
is ``make_rng(7, 3)`` no matter what else ran before it.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k: int | str) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    if k < 0:
        raise ValueError(f"rng keys must be non-negative, got {k}")
    return int(k)


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """PCG64 generator for ``(seed, *keys)``; string keys are CRC32-hashed."""
    entropy = [_key(seed)] + [_key(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys: int | str) -> int:
    """A 63-bit integer seed derived from ``(seed, *keys)``."""
    return int(make_rng(seed, *keys).integers(0, 2**63 - 1))
