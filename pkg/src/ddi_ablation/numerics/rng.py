"""Reproducible random streams.

:class:`SplitMix64` drives every data-level decision (shuffles, negative
sampling, batch order); it is a fixed, documented algorithm so a seed gives
the same sequence in any implementation.  Dropout masks come from numpy's
counter-based Philox generator keyed by (seed, epoch, batch, layer), so a
mask does not depend on the order in which layers are evaluated.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates: for i = n-1 .. 1 swap items[i], items[below(i+1)]."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order


def derive_seed(*parts: int) -> int:
    """Mix integers into one 64-bit seed (SplitMix64 chaining)."""
    state = 0
    for p in parts:
        state = SplitMix64(state ^ (p & _MASK)).next_u64()
    return state


class DropoutStream:
    """Per-batch source of dropout generators keyed by layer id."""

    def __init__(self, seed: int, epoch: int, batch_index: int, phase: int = 0):
        self.key = (seed, phase, epoch, batch_index)

    def layer(self, layer_id: int) -> np.random.Generator:
        ss = np.random.SeedSequence([*self.key, layer_id])
        return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))
