"""Deterministic pseudo-random numbers for reproducible experiments.

The generator is xoshiro256** seeded through splitmix64, so a 64-bit seed
expands to the full 256-bit state and equal seeds yield equal streams on
every platform. Independent components of an experiment (weight init, batch
shuffling, gate noise, ...) each get their own stream derived by hashing
``(seed, label)``; runs therefore do not depend on the order in which
components happen to consume randomness.
"""

from __future__ import annotations

import math

_MASK = 0xFFFFFFFFFFFFFFFF
_TWO53 = float(1 << 53)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


def derive_stream(seed: int, label: str) -> int:
    """Derive a child seed for the named component of an experiment."""
    return _splitmix64((seed & _MASK) ^ _fnv1a64(label))


class Xoshiro256:
    """xoshiro256** with splitmix64 seed expansion.

    State is four 64-bit words; ``next_u64`` advances it by the reference
    recurrence. Identical seeds produce identical streams.
    """

    __slots__ = ("seed", "_s")

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        s0 = _splitmix64(self.seed)
        s1 = _splitmix64(s0)
        s2 = _splitmix64(s1)
        s3 = _splitmix64(s2)
        self._s = [s0, s1, s2, s3]

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & _MASK
        result = (((x << 7) | (x >> 57)) & _MASK) * 9 & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
        self._s = [s0, s1, s2, s3]
        return result

    def uniform01(self) -> float:
        """One draw uniform on [0, 1), using the top 53 bits."""
        return (self.next_u64() >> 11) / _TWO53

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.uniform01()

    def gaussian(self, mean: float = 0.0, sigma: float = 1.0) -> float:
        """One normal draw via Box-Muller, consuming exactly two uniforms.

        ``sigma == 0`` returns ``mean`` exactly; the two uniforms are still
        consumed so the stream position does not depend on sigma.
        """
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        # (0, 1] for the log argument, [0, 1) for the angle.
        u1 = ((self.next_u64() >> 11) + 1) / _TWO53
        u2 = (self.next_u64() >> 11) / _TWO53
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return mean + sigma * z

    def randbelow(self, n: int) -> int:
        """Integer in [0, n). Modulo reduction; the tiny bias is irrelevant
        for shuffling and keeps the draw count at one word per call."""
        if n <= 0:
            raise ValueError(f"n must be positive, got {n}")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
