"""Portable deterministic random streams.

Episode sampling has to be reproducible bit-for-bit across platforms and,
ideally, across language ports, so draws come from a hand-rolled splitmix64
stream instead of a library RNG whose stream may change between releases.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of the UTF-8 encoding of ``text``."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


class SplitMix64:
    """splitmix64 sequence; the reference constants, 64-bit wraparound."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def unit(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("below() needs a positive bound")
        limit = ((1 << 64) // n) * n
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n


def stream_for(global_seed: int, name: str) -> SplitMix64:
    """Derive an independent stream from (global_seed, name).

    Used per disease so episode draws for one disease do not depend on how
    many draws another disease consumed.
    """
    return SplitMix64((fnv1a64(name) ^ ((global_seed & MASK64) * _GOLDEN)) & MASK64)


def sample_without_replacement(items: list, n: int, rng: SplitMix64) -> list:
    """First ``n`` entries of a partial Fisher-Yates shuffle; uniform without
    replacement. Returns all items when the pool is smaller than ``n``."""
    pool = list(items)
    take = min(n, len(pool))
    for i in range(take):
        j = i + rng.below(len(pool) - i)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:take]
