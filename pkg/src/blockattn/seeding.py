"""Named random sub-streams derived from a single run seed.

Every consumer of randomness (init, dropout, data, bench) pulls its own
generator so adding draws to one stream never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "dropout", "data", "batch", "bench")


def substream(seed: int, name: str) -> np.random.Generator:
    """Deterministic generator for (seed, name); independent across names."""
    if name not in STREAMS:
        raise ValueError(f"unknown stream {name!r}, expected one of {STREAMS}")
    tag = zlib.crc32(name.encode("ascii"))
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, tag])
