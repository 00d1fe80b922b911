"""Deterministic random-stream management.

Every stochastic component derives its generator from a single run seed plus
a stable label, so reruns are bit-reproducible and independent components
never share a stream. Labels are hashed with crc32, which is stable across
platforms and Python versions (unlike the builtin ``hash``).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def substream(seed: int, *labels) -> np.random.Generator:
    """Generator for the stream identified by ``labels`` under a run seed.

    Same (seed, labels) always yields the same stream; distinct labels yield
    statistically independent streams.
    """
    key = tuple(_key(p) for p in labels)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
