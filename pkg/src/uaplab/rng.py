"""SplitMix64 PRNG.

Every random choice in the pipeline (dataset sampling, weight init,
batch shuffling, augmentation draws) goes through this generator so that
results are bit-identical across platforms and reruns. Library RNGs do
not pin their streams down to the bit, so we carry our own.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1
_INCREMENT = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class Rng:
    """SplitMix64 stream. State 0 yields 0xE220A8397B1DCDAF first."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _INCREMENT) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        # top 53 bits -> [0, 1)
        return (self.next_u64() >> 11) * 2.0 ** -53

    def below(self, n: int) -> int:
        """Uniform int in [0, n). Bias is negligible for the tiny n used here."""
        return int(self.next_float() * n)

    def gauss(self, sigma: float = 1.0) -> float:
        """Box-Muller draw; consumes exactly two raw outputs."""
        u1 = 1.0 - self.next_float()  # (0, 1], keeps the log finite
        u2 = self.next_float()
        return sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def next_u64_block(self, n: int) -> "np.ndarray":
        """n raw outputs at once. SplitMix64 is counter-based, so the block is
        bit-identical to n sequential next_u64() calls and advances the state
        the same way."""
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_INCREMENT)
        z = np.uint64(self.state) + steps
        self.state = (self.state + n * _INCREMENT) & MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def gauss_block(self, n: int, sigma: float = 1.0) -> "np.ndarray":
        """n Box-Muller draws consuming 2n raw outputs in the same order as n
        gauss() calls (values may differ from the scalar path in the last ulp
        of the libm functions)."""
        raw = self.next_u64_block(2 * n)
        u1 = 1.0 - (raw[0::2] >> np.uint64(11)) * 2.0 ** -53
        u2 = (raw[1::2] >> np.uint64(11)) * 2.0 ** -53
        return sigma * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def shuffle(self, items) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
