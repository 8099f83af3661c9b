"""Counter-based SplitMix64 generator.

Every draw is a pure function of ``(seed, counter)``, so streams are
reproducible across platforms and independent of call order. Sub-streams
are derived by hashing a parent seed with integer or string keys.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _MUL2) & MASK64
    return z ^ (z >> 31)


def splitmix64_scalar(seed: int, count: int) -> list[int]:
    """Reference scalar stream: the first ``count`` outputs for ``seed``."""
    out = []
    state = seed & MASK64
    for _ in range(count):
        state = (state + GOLDEN_GAMMA) & MASK64
        out.append(mix64(state))
    return out


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MUL2)
    return z ^ (z >> np.uint64(31))


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & MASK64


class Rng:
    """Stateless view of one SplitMix64 stream.

    Draw methods take an explicit ``offset`` into the stream instead of
    advancing hidden state; ``derive`` builds independent child streams.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64

    def derive(self, *keys) -> "Rng":
        s = self.seed
        for k in keys:
            s = mix64(s ^ mix64((_key_to_int(k) + GOLDEN_GAMMA) & MASK64))
        return Rng(s)

    def bits(self, n: int, offset: int = 0) -> np.ndarray:
        counters = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + counters * np.uint64(GOLDEN_GAMMA)
            return _mix_array(state)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, offset: int = 0) -> np.ndarray:
        n = int(np.prod(shape))
        u = (self.bits(n, offset) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape, offset: int = 0) -> np.ndarray:
        # Box-Muller over paired uniforms; 1 - u keeps the log argument in (0, 1].
        n = int(np.prod(shape))
        half = (n + 1) // 2
        u = self.uniform((2 * half,), offset=offset)
        u1 = 1.0 - u[:half]
        u2 = u[half:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)
