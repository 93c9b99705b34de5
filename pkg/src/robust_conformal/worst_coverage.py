"""Worst conditional coverage over slabs, halfspaces and balls.

For a fixed direction (or center) each region family reduces to contiguous
runs of sample points once the rows are sorted by projection (or distance):

* slab      -- any window of consecutive points,
* halfspace -- the top-m points in descending projection order,
* ball      -- the m nearest points to the center,

each holding at least ``L = ceil(delta * n)`` points.  The worst coverage is
the smallest fraction of covered points (``score <= q``) over those runs.
For slabs that is a minimum-density segment problem with a length floor,
solved by a prefix-sum scan against the upper convex hull of the prefix
points; the other two families are single prefix scans.

Ties: sorting is stable in row index, and among equally bad runs the first
in scan order wins -- smallest start then smallest end for slabs, smallest
size for halfspaces and balls.  :func:`brute_force_worst_coverage` uses the
same rule so the two agree exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidArgumentError, SizeGuardError

BRUTE_FORCE_MAX_N = 5000
# A run of `size` rows meets coverage target t when it covers at least
# ceil(t * size - _CEIL_SLACK) of them (slack absorbs floating-point noise).
_CEIL_SLACK = 1e-9


class RegionFamily(enum.Enum):
    SLAB = "slab"
    HALFSPACE = "halfspace"
    BALL = "ball"

    @classmethod
    def parse(cls, value) -> "RegionFamily":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidArgumentError(f"unknown region family {value!r}") from None


@dataclass(frozen=True)
class TabularDataset:
    """Features ``X`` (n x d) with one nonconformity score per row."""

    features: np.ndarray
    scores: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        s = np.asarray(self.scores, dtype=float).ravel()
        if x.ndim != 2 or x.shape[1] < 1:
            raise InvalidArgumentError("features must be an n x d matrix with d >= 1")
        if x.shape[0] != s.size:
            raise InvalidArgumentError(
                f"{x.shape[0]} feature rows but {s.size} scores"
            )
        if s.size == 0:
            raise InvalidArgumentError("dataset is empty")
        if np.isnan(x).any() or np.isnan(s).any():
            raise InvalidArgumentError("dataset contains NaN")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "scores", s)

    @property
    def n(self) -> int:
        return self.scores.size

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "TabularDataset":
        return TabularDataset(self.features[rows], self.scores[rows])


@dataclass(frozen=True)
class RegionQuery:
    """A region family indexed by a direction (slab/halfspace) or a center (ball)."""

    family: RegionFamily
    vector: np.ndarray
    delta: float

    def __post_init__(self) -> None:
        family = RegionFamily.parse(self.family)
        v = np.asarray(self.vector, dtype=float).ravel()
        if not 0.0 < self.delta < 1.0:
            raise InvalidArgumentError(f"delta must lie in (0, 1), got {self.delta}")
        if family is not RegionFamily.BALL:
            norm = float(np.linalg.norm(v))
            if norm == 0.0:
                raise InvalidArgumentError("direction is the zero vector")
            if abs(norm - 1.0) > 1e-9:
                raise InvalidArgumentError(f"direction must have unit norm, got {norm}")
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "vector", v)

    @classmethod
    def along(cls, family, direction, delta: float) -> "RegionQuery":
        """Build a query, normalizing ``direction`` for slab/halfspace families."""
        family = RegionFamily.parse(family)
        v = np.asarray(direction, dtype=float).ravel()
        if family is not RegionFamily.BALL:
            norm = float(np.linalg.norm(v))
            if norm == 0.0:
                raise InvalidArgumentError("direction is the zero vector")
            v = v / norm
        return cls(family, v, delta)


@dataclass(frozen=True)
class WorstCoverageResult:
    """Minimizing region and its coverage.

    ``region`` is ``(a, b)`` on the projection axis for slabs, ``(a, inf)``
    for halfspaces ``{v'x >= a}`` and ``(0, r)`` for balls of radius ``r``.
    """

    coverage: float
    region: tuple[float, float]
    mass: float
    count: int


def min_count(n: int, delta: float) -> int:
    """Smallest admissible region size ``ceil(delta * n)``."""
    if not 0.0 < delta < 1.0:
        raise InvalidArgumentError(f"delta must lie in (0, 1), got {delta}")
    return max(1, math.ceil(delta * n - 1e-9))


def _ordering(data: TabularDataset, query: RegionQuery) -> tuple[np.ndarray, np.ndarray]:
    """Row order of the scan and the sort key in that order."""
    if query.vector.size != data.d:
        raise InvalidArgumentError(
            f"query vector has dimension {query.vector.size}, features have {data.d}"
        )
    if query.family is RegionFamily.BALL:
        key = np.linalg.norm(data.features - query.vector, axis=1)
        order = np.argsort(key, kind="stable")
    else:
        key = data.features @ query.vector
        if query.family is RegionFamily.HALFSPACE:
            order = np.argsort(-key, kind="stable")
        else:
            order = np.argsort(key, kind="stable")
    return order, key[order]


def _region(family: RegionFamily, key: np.ndarray, start: int, stop: int) -> tuple[float, float]:
    if family is RegionFamily.SLAB:
        return float(key[start]), float(key[stop - 1])
    if family is RegionFamily.HALFSPACE:
        return float(key[stop - 1]), math.inf
    return 0.0, float(key[stop - 1])


@njit(cache=True)
def _min_density_window(z, min_len):
    """Window [i, j) with j - i >= min_len minimizing sum(z[i:j]) / (j - i).

    Exact integer arithmetic throughout; returns (i, j, covered, length).
    """
    n = z.size
    prefix = np.zeros(n + 1, dtype=np.int64)
    for k in range(n):
        prefix[k + 1] = prefix[k] + z[k]
    hull = np.empty(n + 1, dtype=np.int64)
    m = 0
    best_i = -1
    best_j = -1
    best_num = 0
    best_den = 1
    for j in range(min_len, n + 1):
        p = j - min_len
        # Upper hull of prefix points; collinear points are kept so the
        # earliest start among equal slopes stays available.
        while m >= 2:
            a = hull[m - 2]
            b = hull[m - 1]
            cross = (b - a) * (prefix[p] - prefix[a]) - (prefix[b] - prefix[a]) * (p - a)
            if cross > 0:
                m -= 1
            else:
                break
        hull[m] = p
        m += 1
        # Slopes to (j, prefix[j]) fall, stay flat on the tangent, then rise.
        lo = 0
        hi = m - 1
        pj = prefix[j]
        while lo < hi:
            mid = (lo + hi) // 2
            x0 = hull[mid]
            x1 = hull[mid + 1]
            if (pj - prefix[x0]) * (j - x1) <= (pj - prefix[x1]) * (j - x0):
                hi = mid
            else:
                lo = mid + 1
        i = hull[lo]
        num = pj - prefix[i]
        den = j - i
        lhs = num * best_den
        rhs = best_num * den
        if best_i < 0 or lhs < rhs or (lhs == rhs and i < best_i):
            best_i = i
            best_j = j
            best_num = num
            best_den = den
    return best_i, best_j, best_num, best_den


@njit(cache=True)
def _meets(covered, size, target):
    return covered >= math.ceil(target * size - 1e-9)


@njit(cache=True)
def _slab_worst_quantile(sorted_scores, levels, min_len, target, lo):
    """Index into ``levels`` of the smallest threshold with slab coverage >= target."""
    hi = levels.size - 1
    z = np.empty(sorted_scores.size, dtype=np.int64)
    while lo < hi:
        mid = (lo + hi) // 2
        q = levels[mid]
        for k in range(sorted_scores.size):
            z[k] = 1 if sorted_scores[k] <= q else 0
        _, _, num, den = _min_density_window(z, min_len)
        if _meets(num, den, target):
            hi = mid
        else:
            lo = mid + 1
    return lo


def _prefix_min(z: np.ndarray, min_len: int) -> tuple[int, int]:
    """Smallest-size prefix of length >= min_len with minimal mean: (covered, size)."""
    counts = np.cumsum(z)
    sizes = np.arange(1, z.size + 1)
    ratio = counts[min_len - 1 :] / sizes[min_len - 1 :]
    k = int(np.argmin(ratio))
    return int(counts[min_len - 1 + k]), min_len + k


def worst_coverage(data: TabularDataset, query: RegionQuery, q: float) -> WorstCoverageResult:
    """Least fraction of rows with ``score <= q`` over regions holding >= delta n rows."""
    n = data.n
    min_len = min_count(n, query.delta)
    order, key = _ordering(data, query)
    z = (data.scores[order] <= q).astype(np.int64)
    if query.family is RegionFamily.SLAB:
        start, stop, covered, size = (int(v) for v in _min_density_window(z, min_len))
    else:
        covered, size = _prefix_min(z, min_len)
        start, stop = 0, size
    return WorstCoverageResult(
        coverage=covered / size,
        region=_region(query.family, key, start, stop),
        mass=size / n,
        count=size,
    )


def brute_force_worst_coverage(data: TabularDataset, query: RegionQuery, q: float) -> WorstCoverageResult:
    """Exhaustive enumeration of every admissible run; the reference for :func:`worst_coverage`."""
    n = data.n
    if n > BRUTE_FORCE_MAX_N:
        raise SizeGuardError(f"brute force limited to n <= {BRUTE_FORCE_MAX_N}, got {n}")
    min_len = min_count(n, query.delta)
    order, key = _ordering(data, query)
    z = (data.scores[order] <= q).astype(np.int64)
    if query.family is RegionFamily.SLAB:
        prefix = np.concatenate(([0], np.cumsum(z)))
        length = np.arange(n + 1)[None, :] - np.arange(n + 1)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            mean = (prefix[None, :] - prefix[:, None]) / length
        mean[length < min_len] = np.inf
        start, stop = np.unravel_index(int(np.argmin(mean)), mean.shape)
        start, stop = int(start), int(stop)
    else:
        best = None
        start = stop = 0
        for size in range(min_len, n + 1):
            covered = int(z[:size].sum())
            if best is None or covered * best[1] < best[0] * size:
                best = (covered, size)
                stop = size
    covered = int(z[start:stop].sum())
    size = stop - start
    return WorstCoverageResult(
        coverage=covered / size,
        region=_region(query.family, key, start, stop),
        mass=size / n,
        count=size,
    )


def worst_quantile_for_direction(data: TabularDataset, query: RegionQuery, alpha: float) -> float:
    """Smallest score value ``q`` whose worst coverage along ``query`` reaches ``1 - alpha``.

    Equivalently, the largest region-conditional (1 - alpha)-quantile over
    admissible regions.  Worst coverage is nondecreasing in ``q``, so this is
    a binary search over the distinct score values.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    min_len = min_count(data.n, query.delta)
    order, _ = _ordering(data, query)
    sorted_scores = data.scores[order]
    levels = np.unique(data.scores)
    target = 1.0 - alpha
    # The whole sample is an admissible region, so the answer is at least
    # the plain quantile of all scores.
    n = data.n
    floor = np.sort(data.scores)[max(1, math.ceil(target * n - _CEIL_SLACK)) - 1]
    start = int(np.searchsorted(levels, floor))
    if query.family is RegionFamily.SLAB:
        idx = int(_slab_worst_quantile(sorted_scores, levels, min_len, target, start))
    else:
        lo, hi = start, levels.size - 1
        while lo < hi:
            mid = (lo + hi) // 2
            covered, size = _prefix_min((sorted_scores <= levels[mid]).astype(np.int64), min_len)
            if _meets(covered, size, target):
                hi = mid
            else:
                lo = mid + 1
        idx = lo
    q = float(levels[idx])
    if idx == levels.size - 1:
        # The top level always covers everything; anything else is a logic error.
        assert worst_coverage(data, query, q).coverage == 1.0
    return q
