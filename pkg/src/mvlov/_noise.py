"""Counter-based Gaussian noise streams.

Every draw is a pure function of ``(seed, stream, step, flat index)``: a
Philox-4x64 generator is keyed by mixing ``(seed, stream)`` and its 256-bit
counter is offset by ``step * 2**64``, so blocks for different steps can never
overlap and no generator state is carried between calls. Uniforms are mapped
through the inverse normal CDF (one uniform per normal), which keeps entry
``(i, j)`` of a block independent of every other entry. Consequences relied on
elsewhere: results are bit-identical for any worker count, coupled runs with
the same seed see the same increments, and replicas with different stream ids
are independent.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1

STREAM_INITIAL = 0
STREAM_STEPS = 1

_MIN_U = 2.0 ** -53  # smallest nonzero uniform; ndtri(0) would be -inf


def _splitmix64(state: int):
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def philox_key(*parts: int) -> np.ndarray:
    """Mix integer identifiers (seed, stream, replica, ...) into a 128-bit key."""
    state = 0
    for p in parts:
        state, _ = _splitmix64(state ^ (int(p) & _MASK64))
    state, k0 = _splitmix64(state)
    state, k1 = _splitmix64(state)
    return np.array([k0, k1], dtype=np.uint64)


def _generator(key: np.ndarray, step: int) -> np.random.Generator:
    bg = np.random.Philox(key=key, counter=int(step) << 64)
    return np.random.Generator(bg)


def uniform_block(key: np.ndarray, step: int, shape) -> np.ndarray:
    return _generator(key, step).random(shape, dtype=np.float64)


def normal_block(key: np.ndarray, step: int, shape) -> np.ndarray:
    u = uniform_block(key, step, shape)
    return ndtri(np.maximum(u, _MIN_U))
