"""Deterministic seeded random sampling on a xoshiro256++ core.

A 64-bit seed is expanded through SplitMix64 into the four-word
xoshiro256++ state; the stream id is mixed into the seed before expansion
so distinct ids give statistically independent sequences. Everything is
integer arithmetic on Python ints, so sequences are bit-identical across
runs and platforms.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ParameterError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """SplitMix64 finalizer: avalanche a 64-bit word."""
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class RngStream:
    """One independent, reproducible random stream."""

    __slots__ = ("seed", "stream_id", "_s", "_spare_normal")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        sm_state = self.seed ^ _mix64(self.stream_id ^ _GOLDEN)
        state = []
        for _ in range(4):
            sm_state = (sm_state + _GOLDEN) & _MASK64
            state.append(_mix64(sm_state))
        if not any(state):
            state[0] = _GOLDEN
        self._s = state
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s0 + s3) & _MASK64, 23) + s0) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def random_open(self) -> float:
        """Uniform double strictly inside (0, 1)."""
        return ((self.next_u64() >> 11) + 0.5) * 2.0 ** -53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ParameterError(f"randbelow: n must be positive, got {n}")
        if n == 1:
            return 0
        threshold = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < threshold:
                return u % n

    def normal(self) -> float:
        """Standard normal draw (Box-Muller, spare cached)."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        u1 = 1.0 - self.random()  # (0, 1], keeps log finite
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, shape, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        """Array of independent normal draws, filled in row-major order."""
        n = int(np.prod(shape))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.normal()
        return (mu + sigma * out).reshape(shape)

    def permutation(self, n: int) -> list[int]:
        """Uniform random permutation of range(n) (Fisher-Yates)."""
        idx = list(range(n))
        for i in range(n - 1):
            j = i + self.randbelow(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def _gamma(self, alpha: float) -> float:
        """Gamma(alpha, 1) draw.

        Marsaglia-Tsang squeeze for alpha >= 1; for alpha < 1 draw from
        Gamma(alpha + 1) and apply the u^(1/alpha) boost.
        """
        if alpha < 1.0:
            u = self.random_open()
            return self._gamma(alpha + 1.0) * u ** (1.0 / alpha)
        d = alpha - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.random_open()
            if u < 1.0 - 0.0331 * x * x * x * x:
                return d * v
            if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v


def sample_beta(rng: RngStream, alpha: float) -> float:
    """One draw from Beta(alpha, alpha), strictly inside (0, 1).

    Built from two Gamma(alpha, 1) draws X, Y as X / (X + Y).
    """
    if alpha <= 0.0:
        raise ParameterError(f"sample_beta: alpha must be positive, got {alpha}")
    while True:
        x = rng._gamma(alpha)
        y = rng._gamma(alpha)
        total = x + y
        if total > 0.0:
            lam = x / total
            if 0.0 < lam < 1.0:
                return lam


def sample_subset(rng: RngStream, m: int, k: int) -> list[int]:
    """k distinct indices drawn uniformly from [0, m), ascending.

    Partial Fisher-Yates: after k swap steps the prefix holds a uniform
    k-subset in random order, which is then sorted.
    """
    if k < 1 or k > m:
        raise ParameterError(f"sample_subset: need 1 <= k <= m, got k={k}, m={m}")
    idx = list(range(m))
    for i in range(k):
        j = i + rng.randbelow(m - i)
        idx[i], idx[j] = idx[j], idx[i]
    return sorted(idx[:k])
