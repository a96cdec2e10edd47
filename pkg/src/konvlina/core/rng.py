"""Seeded randomness.

All draws come from numpy's PCG64 (a permuted congruential generator with
128-bit state and 64-bit output); its stream for a given seed is identical
across platforms. Named substreams ("data", "init", "augment", ...) are
derived from one root seed so that changing how much one consumer draws
never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, *names: str | int) -> np.random.Generator:
    """Generator for ``seed``, optionally narrowed to a named substream.

    ``make_rng(7, "data", 12)`` is scene 12 of the data stream of seed 7.
    """
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))
