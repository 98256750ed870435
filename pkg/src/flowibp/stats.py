"""Streaming Monte Carlo accumulation and paired z-statistics.

Accumulators use Welford updates; chunks of samples are reduced with numpy
and merged in a fixed order, which makes results bit-reproducible for a
fixed chunking and equal to within ~1e-12 for any other merge order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientData, NonFiniteSample
from .rng import RngPolicy

__all__ = ["McAccumulator", "paired_z", "RngPolicy", "crn_fd_gradient"]


def crn_fd_gradient(*args, **kwargs):
    """Common-random-number finite-difference gradient oracle.

    Thin alias for :func:`flowibp.estimators.crn_fd_gradient`, which shares
    the chunked simulation machinery with the other estimators.
    """
    from .estimators import crn_fd_gradient as impl

    return impl(*args, **kwargs)


@dataclass
class McAccumulator:
    """Count, running mean, and running sum of squared deviations."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "McAccumulator":
        samples = np.asarray(samples, dtype=float).ravel()
        if samples.size and not np.all(np.isfinite(samples)):
            raise NonFiniteSample("non-finite sample in accumulator input")
        if samples.size == 0:
            return cls()
        mean = float(samples.mean())
        m2 = float(np.sum((samples - mean) ** 2))
        return cls(samples.size, mean, m2)

    def add(self, sample: float) -> "McAccumulator":
        if not math.isfinite(sample):
            raise NonFiniteSample(f"non-finite sample {sample!r}")
        self.count += 1
        delta = sample - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (sample - self.mean)
        return self

    def merged(self, other: "McAccumulator") -> "McAccumulator":
        if other.count == 0:
            return McAccumulator(self.count, self.mean, self.m2)
        if self.count == 0:
            return McAccumulator(other.count, other.mean, other.m2)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return McAccumulator(n, mean, m2)

    @property
    def variance(self) -> float:
        if self.count < 2:
            return 0.0
        return self.m2 / (self.count - 1)

    @property
    def std_error(self) -> float:
        if self.count < 1:
            return 0.0
        return math.sqrt(max(self.variance, 0.0) / self.count)


def paired_z(diff_acc: McAccumulator) -> float:
    """|mean| / (sd / sqrt(n)) of a paired-difference accumulator.

    An exactly-zero difference stream returns 0 (exact identities pass);
    zero spread around a nonzero mean returns +inf (systematic mismatch).
    """
    if diff_acc.count < 2:
        raise InsufficientData("paired z needs at least 2 samples")
    se = diff_acc.std_error
    if se == 0.0:
        return 0.0 if diff_acc.mean == 0.0 else math.inf
    return abs(diff_acc.mean) / se
