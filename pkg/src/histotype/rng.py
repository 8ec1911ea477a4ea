"""Pinned pseudo-random number generation.

Every sampling decision in the pipeline (patient splits, tile quotas,
negative sampling, mosaic picks, synthetic textures, bootstrap resampling)
draws from the generators in this module, so results are reproducible
bit-for-bit across platforms and library versions.

Algorithms (public domain, Blackman & Vigna):

  splitmix64(x):
      x += 0x9E3779B97F4A7C15 (the seeding increment)
      z = x; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
      z = (z ^ (z >> 27)) * 0x94D049BB133111EB
      return z ^ (z >> 31)

  xoshiro256** with state s[0..3], seeded by four splitmix64 outputs:
      result = rotl64(s[1] * 5, 7) * 9
      t = s[1] << 17
      s[2] ^= s[0]; s[3] ^= s[1]; s[1] ^= s[2]; s[0] ^= s[3]
      s[2] ^= t; s[3] = rotl64(s[3], 45)

All arithmetic is modulo 2**64. Floats use the top 53 bits (u >> 11) * 2**-53.
Bounded integers use rejection sampling in the scalar generator; the
vectorized lanes use `u % bound` (bias < bound / 2**64, irrelevant at our
scales, and determinism is what matters here).
"""

from __future__ import annotations

import hashlib
from typing import Sequence, TypeVar

import numpy as np

_MASK64 = (1 << 64) - 1

T = TypeVar("T")


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, (z ^ (z >> 31)) & _MASK64


def derive_seed(master: int, *labels: str | int) -> int:
    """Derive an independent 64-bit seed from a master seed and labels.

    Stage and substream seeds come from hashing, not from consuming master
    stream state, so adding a consumer never shifts another's stream.
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode("ascii"))
    for label in labels:
        h.update(b"|")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """Scalar xoshiro256** generator seeded via splitmix64."""

    def __init__(self, seed: int):
        sm = int(seed) & _MASK64
        state = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            state.append(out)
        self._s = state

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def next_below(self, bound: int) -> int:
        """Uniform integer in [0, bound) via rejection sampling (unbiased)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % bound)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % bound

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * 2.0**-53

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, items: Sequence[T], k: int) -> list[T]:
        """k distinct items by partial Fisher-Yates; order is draw order."""
        n = len(items)
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} from {n} items")
        pool = list(items)
        for i in range(k):
            j = i + self.next_below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


class XoshiroLanes:
    """Vectorized xoshiro256**: many independent lanes stepped together.

    Lane i behaves exactly like Xoshiro256StarStar(seed + i * LANE_STRIDE),
    so the scalar and vector paths can be cross-checked against each other.
    Used where draw volume would make the scalar path slow (bootstrap
    resampling, per-pixel synthetic textures).
    """

    LANE_STRIDE = 0x9E3779B97F4A7C15 ^ 0xA5A5A5A5A5A5A5A5

    def __init__(self, seed: int, lanes: int):
        if lanes <= 0:
            raise ValueError("lanes must be positive")
        base = np.uint64(int(seed) & _MASK64)
        lane_ids = np.arange(lanes, dtype=np.uint64)
        with np.errstate(over="ignore"):
            sm = base + lane_ids * np.uint64(self.LANE_STRIDE)
        state = []
        for _ in range(4):
            sm, out = self._splitmix_vec(sm)
            state.append(out)
        self._s = state
        self.lanes = lanes

    @staticmethod
    def _splitmix_vec(state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with np.errstate(over="ignore"):
            state = state + np.uint64(0x9E3779B97F4A7C15)
            z = state.copy()
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            return state, z ^ (z >> np.uint64(31))

    def next_u64(self) -> np.ndarray:
        s = self._s
        with np.errstate(over="ignore"):
            x = s[1] * np.uint64(5)
            result = ((x << np.uint64(7)) | (x >> np.uint64(57))) * np.uint64(9)
            t = s[1] << np.uint64(17)
            s[2] = s[2] ^ s[0]
            s[3] = s[3] ^ s[1]
            s[1] = s[1] ^ s[2]
            s[0] = s[0] ^ s[3]
            s[2] = s[2] ^ t
            s[3] = (s[3] << np.uint64(45)) | (s[3] >> np.uint64(19))
        return result

    def random_floats(self, n: int) -> np.ndarray:
        """n uniform floats in [0, 1), row-major across lane steps."""
        steps = -(-n // self.lanes)
        out = np.empty(steps * self.lanes, dtype=np.float64)
        for i in range(steps):
            u = self.next_u64()
            out[i * self.lanes : (i + 1) * self.lanes] = (
                (u >> np.uint64(11)).astype(np.float64) * 2.0**-53
            )
        return out[:n]

    def integers_below(self, bound: int, n: int) -> np.ndarray:
        """n integers in [0, bound) (modulo draw; see module docstring)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        steps = -(-n // self.lanes)
        out = np.empty(steps * self.lanes, dtype=np.int64)
        b = np.uint64(bound)
        for i in range(steps):
            out[i * self.lanes : (i + 1) * self.lanes] = (
                (self.next_u64() % b).astype(np.int64)
            )
        return out[:n]
