"""Deterministic random numbers with a fully pinned algorithm.

Streams are xoshiro256** generators seeded through SplitMix64, implemented
here rather than delegated to numpy so that the exact byte-level draw
sequence is part of this package's contract: results must reproduce across
platforms and library versions.

Draw order is part of the contract too. ``uniform``/``normal`` consume the
raw 64-bit stream in documented ways (see each method); array fillers draw
in row-major element order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _rotl(x: int, r: int) -> int:
    return ((x << r) | (x >> (64 - r))) & _MASK64


class SplitMix64:
    """64-bit mixer used for seeding and for deriving independent
    sub-seeds from a parent seed."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """The index-th sub-seed of `seed`: advance a SplitMix64 chain index+1
    times and take the last output. Distinct indices give independent
    streams; derivation is stateless and order-free for callers."""
    if index < 0:
        raise ValueError("sub-seed index must be non-negative")
    mixer = SplitMix64(seed)
    out = mixer.next()
    for _ in range(index):
        out = mixer.next()
    return out


class Xoshiro256StarStar:
    """xoshiro256** stream; state initialized from SplitMix64(seed).

    A freshly constructed generator's four state words are the first four
    SplitMix64 outputs. All-zero state cannot occur from this seeding.
    """

    def __init__(self, seed: int):
        mixer = SplitMix64(seed)
        self.s = [mixer.next(), mixer.next(), mixer.next(), mixer.next()]
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        """One float in [0, 1): the top 53 bits of one u64, scaled."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def normal(self) -> float:
        """Standard normal via the polar-free Box-Muller transform.

        Each invocation of the transform consumes exactly two u64 draws and
        produces two variates; the second is cached and returned by the
        next call without consuming stream. u1 is mapped into (0, 1] so the
        logarithm is always finite.
        """
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        u1 = ((self.next_u64() >> 11) + 1) * 2.0 ** -53
        u2 = (self.next_u64() >> 11) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        self._spare_normal = float(r * np.sin(theta))
        return float(r * np.cos(theta))

    def uniform_array(self, shape) -> np.ndarray:
        """Float64 array of uniforms filled in row-major order."""
        shape = tuple(int(s) for s in shape)
        out = np.empty(shape, dtype=np.float64)
        flat = out.reshape(-1)
        for i in range(flat.size):
            flat[i] = self.uniform()
        return out

    def normal_array(self, shape) -> np.ndarray:
        """Float64 array of standard normals filled in row-major order.

        Continues any cached spare from a previous ``normal`` call first.
        """
        shape = tuple(int(s) for s in shape)
        out = np.empty(shape, dtype=np.float64)
        flat = out.reshape(-1)
        for i in range(flat.size):
            flat[i] = self.normal()
        return out

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection on the top bits, so the
        result is exactly uniform for any n."""
        if n <= 0:
            raise ValueError("randbelow needs a positive bound")
        nbits = (n - 1).bit_length()
        if nbits == 0:
            return 0
        while True:
            v = self.next_u64() >> (64 - nbits)
            if v < n:
                return v

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle, drawing via ``randbelow`` from
        the top index downward."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
