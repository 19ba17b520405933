"""Named, order-independent random substreams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"substream keys must be non-negative, got {part}")
    return int(part)


def seed_sequence(seed: int, *keys: int | str) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(_key(k) for k in keys))


def rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Generator for the substream ``(seed, *keys)``.

    ``rng(7, "scene")`` and ``rng(7, "init")`` are statistically independent,
    and neither depends on how many draws the other has made.
    """
    return np.random.default_rng(seed_sequence(seed, *keys))


def derive_seed(seed: int, *keys: int | str) -> int:
    """A 63-bit integer seed for the substream, for APIs that take plain ints."""
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
