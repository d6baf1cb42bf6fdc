"""Deterministic random-stream derivation.

Every random consumer in the package derives its own generator from
(root seed, purpose tags), so consuming draws in one stream never shifts
another. This is what makes scheme degeneracy (zero-noise schemes matching
plain MSE training bit for bit) and parallel evaluation order-independence
possible.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_word(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def stream(seed: int, *tags) -> np.random.Generator:
    """PCG64 generator keyed by a root seed plus purpose tags."""
    words = [int(seed) & 0xFFFFFFFF] + [_tag_word(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(words))
