"""Seedable, portable PRNG used everywhere randomness is needed.

The generator is splitmix64 (Steele, Lea & Flood, "Fast splittable
pseudorandom number generators"), frozen here so that traces, samples and
weight initializations are byte-identical across platforms and Python
versions.  Do not swap in ``random`` or numpy generators: golden test
values depend on this exact bit stream.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """splitmix64 stream; each ``next_u64`` advances the state by one step."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randbelow(self, n: int) -> int:
        """Integer in [0, n). Plain modulo; bias is negligible for n << 2^64."""
        if n <= 0:
            raise ValueError("randbelow requires n > 0")
        return self.next_u64() % n

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def sample_indices(self, population: int, k: int) -> list[int]:
        """k distinct indices from range(population), in ascending order.

        Partial Fisher-Yates over an index array; deterministic given the
        stream position.
        """
        if k > population:
            raise ValueError("sample larger than population")
        idx = list(range(population))
        for i in range(k):
            j = i + self.randbelow(population - i)
            idx[i], idx[j] = idx[j], idx[i]
        return sorted(idx[:k])

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def derive_seed(master: int, label: str) -> int:
    """Stable child seed for a named purpose (e.g. "train", "fold3")."""
    return SplitMix64(master ^ _fnv1a64(label)).next_u64()
