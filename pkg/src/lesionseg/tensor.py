"""Dense tensor construction, deterministic pseudo-randomness, parameter init.

Tensors are plain numpy arrays (row-major, float32 for computation, float64
for verification). The PRNG is SplitMix64, threaded explicitly as an
immutable state so identical seeds always yield identical streams.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_U53 = float(2.0 ** -53)


def tensor_new(shape: Sequence[int], fill: float = 0.0, dtype=np.float32) -> np.ndarray:
    """Allocate a tensor of `shape` with every element set to `fill`."""
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0 or any(d < 1 for d in dims):
        raise ShapeError(f"invalid tensor shape {dims!r}: all dims must be >= 1")
    return np.full(dims, fill, dtype=dtype)


@dataclass(frozen=True)
class RngState:
    """SplitMix64 state; advancing returns a fresh state, never mutates."""

    state: int = 0

    def __post_init__(self):
        object.__setattr__(self, "state", int(self.state) & _MASK64)


def rng_next(rng: RngState) -> tuple[int, RngState]:
    """One SplitMix64 step: returns (64-bit output, advanced state)."""
    s = (rng.state + _GAMMA) & _MASK64
    z = s
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    z = z ^ (z >> 31)
    return z, RngState(s)


def rng_next_bulk(rng: RngState, count: int) -> tuple[np.ndarray, RngState]:
    """Vectorized rng_next: uint64 array of `count` outputs plus new state.

    Bitwise identical to calling rng_next `count` times.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    base = np.uint64(rng.state)
    steps = (np.arange(1, count + 1, dtype=np.uint64)) * np.uint64(_GAMMA)
    z = base + steps  # wraps mod 2**64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    z = z ^ (z >> np.uint64(31))
    return z, RngState((rng.state + count * _GAMMA) & _MASK64)


def rng_uniform(rng: RngState) -> tuple[float, RngState]:
    """Uniform double in [0, 1): top 53 bits of rng_next scaled by 2**-53."""
    z, rng = rng_next(rng)
    return (z >> 11) * _U53, rng


def rng_uniform_bulk(rng: RngState, count: int) -> tuple[np.ndarray, RngState]:
    """Vectorized rng_uniform: float64 array in [0, 1)."""
    z, rng = rng_next_bulk(rng, count)
    return (z >> np.uint64(11)).astype(np.float64) * _U53, rng


def rng_randint(rng: RngState, bound: int) -> tuple[int, RngState]:
    """Integer in [0, bound) via modulo reduction (bias irrelevant here)."""
    if bound < 1:
        raise ValueError("bound must be >= 1")
    z, rng = rng_next(rng)
    return z % bound, rng


def rng_perm(rng: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """Fisher-Yates permutation of range(n), deterministic in the seed."""
    perm = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j, rng = rng_randint(rng, i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm, rng


def he_init(rng: RngState, shape: Sequence[int], fan_in: int,
            dtype=np.float32) -> tuple[np.ndarray, RngState]:
    """Normal(0, sqrt(2/fan_in)) samples via Box-Muller over rng_uniform."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0 or any(d < 1 for d in dims):
        raise ShapeError(f"invalid tensor shape {dims!r}: all dims must be >= 1")
    n = int(np.prod(dims))
    pairs = (n + 1) // 2
    u, rng = rng_uniform_bulk(rng, 2 * pairs)
    u1, u2 = u[0::2], u[1::2]
    # 1 - u1 lies in (0, 1], so the log is always finite
    r = np.sqrt(-2.0 * np.log1p(-u1))
    z = np.empty(2 * pairs, dtype=np.float64)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    std = np.sqrt(2.0 / fan_in)
    return (z[:n] * std).reshape(dims).astype(dtype), rng
