"""Deterministic named substreams off a single root seed.

Every random draw in the package flows from one integer seed through
labeled substreams, so per-unit or per-fold work can be parallelized or
reordered without changing results.  Labels hash through crc32, which is
stable across platforms and interpreter runs (unlike builtin hash).
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *labels: str | int) -> np.random.Generator:
    """Generator for the substream identified by (seed, labels)."""
    words = [int(seed) & 0xFFFFFFFF]
    for label in labels:
        if isinstance(label, int):
            words.append(label & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(label.encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(words))


def subseed(seed: int, *labels: str | int) -> int:
    """A plain integer seed derived from (seed, labels), for APIs that take one."""
    return int(substream(seed, *labels).integers(0, 2**31))
