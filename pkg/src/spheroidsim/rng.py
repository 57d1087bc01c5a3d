"""Counter-based random streams.

Every draw is a pure function of ``(seed, key, purpose, counter, lane)``, so
results do not depend on the order in which cells are visited or on how work
is split between threads.  The mixer is the SplitMix64 finalizer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

# purposes
LOCOMOTION = 1
DIVISION = 2
DAUGHTER = 3
COINCIDENT = 4
PLACEMENT = 5

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@nb.njit(cache=True, inline="always")
def _mix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def uniform01(seed, key, purpose, counter, lane):
    """Uniform double in [0, 1) for the given coordinates."""
    h = _mix(np.uint64(seed))
    h = _mix(h ^ np.uint64(key))
    h = _mix(h ^ (np.uint64(purpose) << np.uint64(48)) ^ np.uint64(counter))
    h = _mix(h ^ np.uint64(lane))
    return (h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@nb.njit(cache=True)
def unit_vector(seed, key, purpose, counter, lane0):
    """Direction uniform on the unit sphere (two lanes consumed)."""
    z = 2.0 * uniform01(seed, key, purpose, counter, lane0) - 1.0
    phi = 2.0 * np.pi * uniform01(seed, key, purpose, counter, lane0 + 1)
    s = np.sqrt(max(0.0, 1.0 - z * z))
    return np.array([s * np.cos(phi), s * np.sin(phi), z])


@dataclass(frozen=True)
class RngStream:
    """Deterministic per-cell, per-purpose substreams derived from one seed."""

    seed: int

    def uniform(self, key: int, purpose: int, counter: int, lane: int = 0) -> float:
        return float(uniform01(self.seed, key, purpose, counter, lane))

    def direction(self, key: int, purpose: int, counter: int, lane: int = 0) -> np.ndarray:
        return unit_vector(self.seed, key, purpose, counter, lane)

    def generator(self, *spawn_key: int) -> np.random.Generator:
        """A conventional generator for bulk sampling, keyed off this stream."""
        return np.random.default_rng([self.seed, *spawn_key])
