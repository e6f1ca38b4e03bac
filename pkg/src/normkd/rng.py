"""Seed sub-stream derivation.

Every random stream in the package is a PCG64 generator seeded from a
``SeedSequence`` over ``(seed, *keys)``. String keys are mapped to integers
with CRC-32, so ``derive_rng(7, "init")`` and ``derive_rng(7, "batches", 3)``
are independent and stable across runs and platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError("seed keys must be non-negative")
    return k


def derive_seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([_key(seed), *(_key(k) for k in keys)])


def derive_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, *keys)))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed for the sub-stream ``(seed, *keys)``."""
    return int(derive_seed_sequence(seed, *keys).generate_state(1, np.uint64)[0] >> np.uint64(1))
