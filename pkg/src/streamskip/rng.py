"""Portable seed-derived random streams.

SplitMix64: output ``i`` of the stream seeded with ``s`` is
``mix(s + (i + 1) * 0x9E3779B97F4A7C15)`` where ``mix`` is

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

all modulo 2**64. Normals use Box-Muller over consecutive output pairs, so
streams are bit-identical on every platform with IEEE doubles.
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Return ``count`` consecutive uint64 outputs starting at stream position ``offset``."""
    idx = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * GOLDEN_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def uniform(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Doubles in (0, 1] from the top 53 bits of each output."""
    bits = splitmix64(seed, count, offset) >> np.uint64(11)
    return (bits.astype(np.float64) + 1.0) * (1.0 / (1 << 53))


def standard_normal(seed: int, count: int) -> np.ndarray:
    """Box-Muller normals: pair k uses outputs 2k and 2k+1."""
    pairs = (count + 1) // 2
    u = uniform(seed, 2 * pairs)
    u1, u2 = u[0::2], u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:count]
