"""Sorted score samples and order-statistic quantiles."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

# Absorbs upward floating-point noise in n * beta before taking the ceiling,
# so e.g. 19 * (20/19) * 0.95 still selects the 19th order statistic.
_CEIL_SLACK = 1e-9


def order_index(n: int, beta: float) -> int:
    """1-indexed rank ``ceil(n * beta)`` used by the inf-CDF quantile."""
    return max(1, math.ceil(n * beta - _CEIL_SLACK))


@dataclass(frozen=True)
class EmpiricalScores:
    """Nonconformity scores held sorted ascending (the empirical measure)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.sort(np.asarray(self.values, dtype=float).ravel())
        if arr.size == 0:
            raise InvalidArgumentError("score sample is empty")
        if np.isnan(arr).any():
            raise InvalidArgumentError("score sample contains NaN")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return int(self.values.size)

    def cdf(self, t: float) -> float:
        """Right-continuous empirical CDF: fraction of scores <= t."""
        return int(np.searchsorted(self.values, t, side="right")) / self.n

    def count_le(self, t: float) -> int:
        return int(np.searchsorted(self.values, t, side="right"))

    def __len__(self) -> int:
        return self.n


def as_scores(scores) -> EmpiricalScores:
    return scores if isinstance(scores, EmpiricalScores) else EmpiricalScores(scores)


def empirical_quantile(scores: EmpiricalScores, beta: float) -> float:
    """The ``ceil(n*beta)``-th order statistic; ``+inf`` once that rank exceeds n."""
    if not beta > 0:
        raise InvalidArgumentError(f"quantile level must be positive, got {beta}")
    scores = as_scores(scores)
    k = order_index(scores.n, beta)
    if k > scores.n:
        return math.inf
    return float(scores.values[k - 1])
