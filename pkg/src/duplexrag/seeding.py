"""Named, order-independent RNG streams derived from the global seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def rng_for(seed: int, *names: str) -> np.random.Generator:
    """Generator keyed by ``(seed, *names)``; stable across runs and platforms."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [_key(n) for n in names]))
