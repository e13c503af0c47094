"""Deterministic seed derivation and RNG stream construction.

All randomness in the package flows through counter-based Philox streams
keyed by 64-bit hashes of (base_seed, index...) tuples, so results are
independent of scheduling and batch composition.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1


def hash64(*parts: int) -> int:
    """Mix integer parts into a stable 64-bit value (blake2b based)."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(struct.pack("<q", int(p) & _MASK64))
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int, *indices: int) -> np.random.Generator:
    """Counter-based generator for the stream (seed, indices...)."""
    return np.random.Generator(np.random.Philox(key=hash64(seed, *indices)))
