"""Named random streams derived from one root seed.

A stream is identified by the root seed plus a tuple of keys. String keys are
mapped to integers with CRC32, so ``stream(7, "explore", 2)`` is the same
generator in every process and on every platform.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("integer stream keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))


def stream(seed: int, *keys) -> np.random.Generator:
    """Generator for the stream named by ``keys`` under ``seed``."""
    return np.random.default_rng(seed_sequence(seed, *keys))


def child_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed for the named stream, for APIs that want an int."""
    return int(seed_sequence(seed, *keys).generate_state(2, np.uint64)[0] >> np.uint64(1))
