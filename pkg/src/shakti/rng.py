"""SplitMix64 generator: scalar stream for sampling, vectorized blocks for weight init."""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """One 64-bit draw per call. State is a plain int so it can be saved and restored."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix(self.state)

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 bits of resolution."""
        return (self.next_u64() >> 11) * 2.0**-53


def splitmix64_block(state: int, n: int) -> tuple[np.ndarray, int]:
    """The next ``n`` outputs of a SplitMix64 stream at ``state``, plus the advanced state.

    Equal to calling ``SplitMix64(state).next_u64()`` n times.
    """
    steps = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(state & MASK64) + steps * np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return z, (state + n * GOLDEN) & MASK64


def normal_block(state: int, n: int, std: float = 1.0) -> tuple[np.ndarray, int]:
    """``n`` float32 normals via Box-Muller; each pair of draws yields a cosine and a sine sample."""
    pairs = (n + 1) // 2
    raw, state = splitmix64_block(state, 2 * pairs)
    u = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(1.0 - u[0::2])) * std  # 1 - u lies in (0, 1]
    theta = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * pairs, dtype=np.float32)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n], state


def stream_seed(seed: int, name: str) -> int:
    """Independent per-tensor stream key derived from a global seed and a tensor name."""
    h = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return _mix((seed & MASK64) ^ int.from_bytes(h, "little"))
