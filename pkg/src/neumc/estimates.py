"""Monte-Carlo scalar results and order-independent aggregation.

Estimates carry a value, its standard error, the path count and the
truncation horizon they were computed at.  Aggregation across path chunks
uses Kahan-compensated summation in chunk-index order, so the combined
result is bit-identical no matter how many workers produced the partials.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Estimate:
    """Monte-Carlo scalar result."""

    value: float
    stderr: float
    n_paths: int
    horizon: float = 0.0

    def combined_se(self, other: "Estimate") -> float:
        return float(np.hypot(self.stderr, other.stderr))

    def within(self, target: float, n_se: float = 3.0, extra: float = 0.0) -> bool:
        return abs(self.value - target) <= n_se * self.stderr + extra

    def __str__(self) -> str:  # compact diagnostic form
        return f"{self.value:.6g} +- {self.stderr:.2g} (n={self.n_paths}, T={self.horizon:g})"


class KahanSum:
    """Compensated running sum; works elementwise on arrays of a fixed shape."""

    def __init__(self, shape=()):
        self.total = np.zeros(shape)
        self._comp = np.zeros(shape)

    def add(self, x) -> None:
        y = np.asarray(x, dtype=float) - self._comp
        t = self.total + y
        self._comp = (t - self.total) - y
        self.total = t

    def value(self):
        return self.total if self.total.shape else float(self.total)


def kahan_total(parts) -> np.ndarray:
    """Sum an ordered sequence of arrays/scalars with compensation."""
    it = iter(parts)
    first = np.asarray(next(it), dtype=float)
    acc = KahanSum(first.shape)
    acc.add(first)
    for p in it:
        acc.add(p)
    return acc.total


@dataclass
class MomentAccumulator:
    """Chunk-ordered accumulator for a scalar sample: mean and stderr.

    ``add_chunk`` receives per-path values for one chunk; partial sums are
    combined with compensation in call order.
    """

    n: int = 0
    _s: KahanSum = field(default_factory=KahanSum)
    _s2: KahanSum = field(default_factory=KahanSum)

    def add_chunk(self, samples: np.ndarray) -> None:
        samples = np.asarray(samples, dtype=float)
        self.n += samples.size
        self._s.add(samples.sum())
        self._s2.add(np.square(samples).sum())

    def add_partial(self, s: float, s2: float, count: int) -> None:
        self.n += count
        self._s.add(s)
        self._s2.add(s2)

    def estimate(self, horizon: float = 0.0) -> Estimate:
        if self.n == 0:
            raise ValueError("no samples accumulated")
        mean = self._s.value() / self.n
        var = max(self._s2.value() / self.n - mean * mean, 0.0)
        se = np.sqrt(var / self.n) if self.n > 1 else np.inf
        return Estimate(float(mean), float(se), self.n, horizon)


def mean_estimate(samples: np.ndarray, horizon: float = 0.0) -> Estimate:
    acc = MomentAccumulator()
    acc.add_chunk(np.asarray(samples, dtype=float))
    return acc.estimate(horizon)
