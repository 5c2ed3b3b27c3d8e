"""Labeled RNG substreams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``.

    Labels may be strings or non-negative ints; the same tuple always yields
    the same stream, and different tuples give statistically independent ones.
    """
    key = [int(seed) & 0xFFFFFFFF]
    for lab in labels:
        key.append(zlib.crc32(lab.encode()) if isinstance(lab, str) else int(lab))
    return np.random.default_rng(np.random.SeedSequence(key))
