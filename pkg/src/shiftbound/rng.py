"""Seed derivation and streaming Monte Carlo accumulation.

Every stochastic routine in the package takes an explicit integer seed.
Draws are split into fixed-size chunks; chunk ``i`` of stream ``s`` gets its
own Philox generator keyed on ``(seed, s, i)``, so results do not depend on
how chunks are scheduled across workers.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, NamedTuple

import numpy as np

SEED_MASK = (1 << 64) - 1
DEFAULT_CHUNK = 16384


class Estimate(NamedTuple):
    """Monte Carlo mean with its standard error."""

    estimate: float
    std_error: float


def _word(x) -> int:
    if isinstance(x, str):
        return zlib.crc32(x.encode("utf-8"))
    return int(x) & SEED_MASK


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based generator for ``seed`` and an optional stream path.

    Stream components may be ints or short strings (hashed with CRC32).
    """
    entropy = [_word(seed)] + [_word(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *stream) -> int:
    """A 64-bit child seed, for handing to another seeded routine."""
    return int(make_rng(seed, "derive", *stream).integers(0, 2**63))


class Moments:
    """Running count, mean and (co)variance with an associative merge."""

    def __init__(self, dim: int | None = None):
        self.dim = dim
        self.count = 0
        if dim is None:
            self.mean = 0.0
            self.m2 = 0.0
        else:
            self.mean = np.zeros(dim)
            self.m2 = np.zeros((dim, dim))

    @classmethod
    def from_block(cls, block: np.ndarray) -> "Moments":
        block = np.asarray(block, dtype=float)
        if block.ndim == 1:
            acc = cls()
            acc.count = block.shape[0]
            if acc.count:
                acc.mean = float(block.mean())
                acc.m2 = float(((block - acc.mean) ** 2).sum())
            return acc
        acc = cls(block.shape[1])
        acc.count = block.shape[0]
        if acc.count:
            acc.mean = block.mean(axis=0)
            centered = block - acc.mean
            acc.m2 = centered.T @ centered
        return acc

    def merge(self, other: "Moments") -> "Moments":
        if other.count == 0:
            return self
        if self.count == 0:
            self.dim, self.count, self.mean, self.m2 = other.dim, other.count, other.mean, other.m2
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        if self.dim is None:
            self.m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        else:
            self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.count * other.count / n)
        self.mean = self.mean + delta * (other.count / n)
        self.count = n
        return self

    def update(self, block: np.ndarray) -> "Moments":
        return self.merge(Moments.from_block(block))

    @property
    def variance(self):
        if self.count < 2:
            return 0.0 if self.dim is None else np.zeros((self.dim, self.dim))
        return self.m2 / (self.count - 1)

    @property
    def std_error(self):
        """Standard error of the mean (scalar case) or its covariance (vector case)."""
        if self.count == 0:
            raise ValueError("no draws accumulated")
        if self.dim is None:
            return math.sqrt(max(self.variance, 0.0) / self.count)
        return self.variance / self.count

    def estimate(self) -> Estimate:
        if self.dim is not None:
            raise TypeError("vector moments have no scalar estimate")
        return Estimate(float(self.mean), self.std_error)


def chunk_sizes(draws: int, chunk: int = DEFAULT_CHUNK) -> list[int]:
    if draws < 1:
        raise ValueError("draws must be positive")
    full, rest = divmod(draws, chunk)
    return [chunk] * full + ([rest] if rest else [])


def monte_carlo(
    draw: Callable[[np.random.Generator, int], np.ndarray],
    draws: int,
    seed: int,
    stream: str,
    chunk: int = DEFAULT_CHUNK,
    workers: int = 1,
    dim: int | None = None,
) -> Moments:
    """Accumulate ``draw(rng, n)`` blocks over ``draws`` total samples.

    ``draw`` returns an ``(n,)`` array of per-draw values or an ``(n, dim)``
    array of per-draw vectors. Chunk statistics are merged in chunk order, so
    the result is bit-identical for any ``workers``.
    """
    sizes = chunk_sizes(draws, chunk)

    def run(i: int) -> Moments:
        return Moments.from_block(draw(make_rng(seed, stream, i), sizes[i]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(i) for i in range(len(sizes))]
    acc = Moments(dim)
    for part in parts:
        acc.merge(part)
    return acc
