"""Counter-based random numbers for reproducible masking.

A value is a pure function of ``(key, index)``: the SplitMix64 output for
counter ``index`` under state ``key``.  Nothing is carried between calls, so a
tensor can be split into chunks and processed in any order or on any number
of threads without changing a single bit.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & MASK64
    return h


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def tensor_key(seed: int, name: str) -> int:
    return (seed & MASK64) ^ fnv1a64(name)


def derive_seed(seed: int, stream: int) -> int:
    """Independent seed for the ``stream``-th input of a multi-input operation."""
    return mix64((seed & MASK64) + (stream + 1) * GOLDEN_GAMMA)


def uniform_scalar(key: int, index: int) -> float:
    """Reference scalar path: uniform double in [0, 1) with 53 random bits."""
    return (mix64(key + (index + 1) * GOLDEN_GAMMA) >> 11) * 2.0**-53


def uniform(key: int, start: int, stop: int) -> np.ndarray:
    """Uniform doubles in [0, 1) for counters ``start .. stop-1`` (vectorized)."""
    idx = np.arange(start + 1, stop + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key & MASK64) + idx * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
