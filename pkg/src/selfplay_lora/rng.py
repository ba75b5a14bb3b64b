"""Seedable, platform-stable random streams.

Every stream is a Philox counter-based generator keyed by a tuple of
integers, so any component can derive an independent stream from
``(root_seed, step, member ids, ...)`` without sharing mutable state.
"""
from __future__ import annotations

import zlib

import numpy as np


def _word(x) -> int:
    if isinstance(x, str):
        return zlib.crc32(x.encode("utf-8"))
    return int(x) & 0xFFFFFFFFFFFFFFFF


def stream(*key) -> np.random.Generator:
    """Return a fresh generator for ``key`` (ints and/or short strings)."""
    seq = np.random.SeedSequence([_word(k) for k in key])
    return np.random.Generator(np.random.Philox(seq))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed for a sub-stream (one seed per operator child)."""
    return int(rng.integers(0, 2**63 - 1))
