"""Hierarchical seeding: experiment seed -> named scope -> integer indices.

Every stream is derived from ``numpy.random.SeedSequence`` with a spawn key
built from the path, so a stream depends only on its own path and never on
how many draws other streams consumed.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def rng_for(seed: int, *path) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))
