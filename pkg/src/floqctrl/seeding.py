"""Counter-based seed splitting: every random stream derives from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Independent generator for the stream named by ``keys`` under ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.default_rng(ss)
