"""Scalar f-divergence machinery.

The central objects are the two-point worst-case CDF map

    g(beta) = inf{z in [0, 1] : beta f(z/beta) + (1-beta) f((1-z)/(1-beta)) <= rho}

and its generalized inverse ``g_inv(tau) = sup{beta : g(beta) <= tau}``.  A
distribution within divergence ``rho`` of P can push the mass of a set of
P-probability ``beta`` down to ``g(beta)`` and no further, so the worst-case
(1 - alpha)-quantile of P is its plain quantile at level ``g_inv(1 - alpha)``.

Both maps are one-dimensional monotone root-finding problems and are solved
by bisection.  Returned values are always on the feasible side of the
bracket: ``g`` is never understated and ``g_inv`` never overstated by more
than the bisection tolerance.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateError, InvalidArgumentError
from .scores import EmpiricalScores, as_scores, empirical_quantile, order_index

PROB_TOL = 1e-10
RHO_REL_TOL = 1e-9
RHO_CAP = 1e6


class DivergenceKind(enum.Enum):
    CHI_SQUARE = "chi2"
    KULLBACK_LEIBLER = "kl"
    CUSTOM = "custom"


def _chi_square(t: float) -> float:
    return 0.5 * (t - 1.0) ** 2


def _kullback_leibler(t: float) -> float:
    if t == 0.0:
        return 0.0
    return t * math.log(t)


@dataclass(frozen=True)
class DivergenceSpec:
    """A convex, 1-coercive generator ``f`` with ``f(1) = 0``.

    Use :func:`chi_square`, :func:`kullback_leibler` or :func:`custom`
    rather than constructing this directly.  Custom generators are probed
    for the required properties at construction time.
    """

    kind: DivergenceKind
    name: str
    generator: Callable[[float], float] = field(repr=False)

    def __post_init__(self) -> None:
        if self.kind is DivergenceKind.CUSTOM:
            _probe_generator(self.generator, self.name)

    def __call__(self, t: float) -> float:
        return self.generator(t)

    @property
    def strictly_convex(self) -> bool:
        return self.kind is not DivergenceKind.CUSTOM


def _probe_generator(f: Callable[[float], float], name: str) -> None:
    f1 = f(1.0)
    if not abs(f1) <= 1e-12:
        raise InvalidArgumentError(f"divergence {name!r}: f(1) = {f1}, expected 0")
    # Half-step grid so every midpoint of the 0.05-grid is itself tabulated.
    half = np.array([f(0.025 * k) for k in range(2, 801)])
    on_grid = half[::2]  # f at 0.05, 0.10, ..., 20
    i, j = np.triu_indices(on_grid.size, k=1)
    mid = half[i + j]  # (a+b)/2 = 0.025 * (2i + 2j + 4) sits at half index i + j
    chord = 0.5 * (on_grid[i] + on_grid[j])
    if np.any(mid > chord + 1e-9):
        raise InvalidArgumentError(f"divergence {name!r}: generator is not convex")
    if not f(1e6) / 1e6 > f(1e3) / 1e3:
        raise InvalidArgumentError(f"divergence {name!r}: generator is not 1-coercive")


def chi_square() -> DivergenceSpec:
    """``f(t) = (t - 1)^2 / 2``, the scaling under which ``g(beta) = (beta - sqrt(2 rho beta (1-beta)))_+``.

    The unscaled ``(t - 1)^2`` is available through :func:`custom`; its ball
    of radius ``rho`` equals this one at radius ``rho / 2``.
    """
    return DivergenceSpec(DivergenceKind.CHI_SQUARE, "chi2", _chi_square)


def kullback_leibler() -> DivergenceSpec:
    """``f(t) = t log t`` with ``f(0) = 0``."""
    return DivergenceSpec(DivergenceKind.KULLBACK_LEIBLER, "kl", _kullback_leibler)


def custom(generator: Callable[[float], float], name: str = "custom") -> DivergenceSpec:
    return DivergenceSpec(DivergenceKind.CUSTOM, name, generator)


def by_name(name: str) -> DivergenceSpec:
    key = name.lower()
    if key in ("chi2", "chisquare", "chi-square"):
        return chi_square()
    if key in ("kl", "kullbackleibler"):
        return kullback_leibler()
    raise InvalidArgumentError(f"unknown divergence {name!r} (expected chi2 or kl)")


@dataclass(frozen=True)
class RadiusLevelPair:
    rho: float
    alpha: float

    def __post_init__(self) -> None:
        _check_rho(self.rho)
        if not 0.0 < self.alpha < 1.0:
            raise InvalidArgumentError(f"alpha must lie in (0, 1), got {self.alpha}")


def _check_prob(value: float, what: str) -> None:
    if not 0.0 <= value <= 1.0:
        raise InvalidArgumentError(f"{what} must lie in [0, 1], got {value}")


def _check_rho(rho: float) -> None:
    if not rho >= 0.0:
        raise InvalidArgumentError(f"rho must be nonnegative, got {rho}")


def _weighted(div: DivergenceSpec, mass: float, numer: float) -> float:
    """``mass * f(numer / mass)`` with the boundary conventions at ``mass = 0``."""
    if mass > 0.0:
        return mass * div(numer / mass)
    # 0 f(0/0) = 0; 0 f(c/0) = c * lim f(t)/t = +inf for 1-coercive f.
    return 0.0 if numer == 0.0 else math.inf


def two_point_divergence(div: DivergenceSpec, beta: float, z: float) -> float:
    """Divergence between Bernoulli(z) and Bernoulli(beta)."""
    return _weighted(div, beta, z) + _weighted(div, 1.0 - beta, 1.0 - z)


def eval_g(div: DivergenceSpec, rho: float, beta: float) -> float:
    """Smallest mass a ``rho``-close distribution can leave on a set of mass ``beta``."""
    _check_prob(beta, "beta")
    _check_rho(rho)
    if beta == 0.0:
        return 0.0
    if beta == 1.0:
        return 1.0
    if rho == 0.0 and div.strictly_convex:
        return beta
    if two_point_divergence(div, beta, 0.0) <= rho:
        return 0.0
    lo, hi = 0.0, beta  # lo infeasible, hi feasible
    while hi - lo > PROB_TOL:
        mid = 0.5 * (lo + hi)
        if two_point_divergence(div, beta, mid) <= rho:
            hi = mid
        else:
            lo = mid
    return hi


def eval_g_inverse(div: DivergenceSpec, rho: float, tau: float) -> float:
    """``sup{beta in [tau, 1] : D(Bern(tau) || Bern(beta)) <= rho}``."""
    _check_prob(tau, "tau")
    _check_rho(rho)
    if tau == 1.0:
        return 1.0
    if rho == 0.0 and div.strictly_convex:
        return tau
    lo, hi = tau, 1.0  # lo feasible, hi infeasible (f(tau) + inf at beta = 1)
    while hi - lo > PROB_TOL:
        mid = 0.5 * (lo + hi)
        if two_point_divergence(div, mid, tau) <= rho:
            lo = mid
        else:
            hi = mid
    return lo


def worst_case_cdf(div: DivergenceSpec, rho: float, scores: EmpiricalScores, t: float) -> float:
    """``g(F_n(t))``: the least CDF value at ``t`` over the divergence ball."""
    scores = as_scores(scores)
    return eval_g(div, rho, scores.cdf(t))


def worst_case_quantile(div: DivergenceSpec, rho: float, scores: EmpiricalScores, beta: float) -> float:
    """Largest ``beta``-quantile over the ball: the plain quantile at ``g_inv(beta)``."""
    return empirical_quantile(as_scores(scores), eval_g_inverse(div, rho, beta))


@dataclass(frozen=True)
class RadiusEstimate:
    """Result of inverting the threshold-to-radius map.

    ``saturated`` marks thresholds at or above the largest score, for which
    the true radius is infinite and ``rho`` holds the cap.  ``infeasible``
    marks thresholds already below the plain (1 - alpha)-quantile.
    """

    rho: float
    saturated: bool = False
    infeasible: bool = False


def rho_for_threshold(
    div: DivergenceSpec,
    alpha: float,
    scores: EmpiricalScores,
    q: float,
    cap: float = RHO_CAP,
) -> RadiusEstimate:
    """Largest radius whose worst-case (1 - alpha)-quantile does not exceed ``q``."""
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    scores = as_scores(scores)
    if q >= scores.values[-1]:
        return RadiusEstimate(cap, saturated=True)

    level = 1.0 - alpha

    def within(rho: float) -> bool:
        return worst_case_quantile(div, rho, scores, level) <= q

    if not within(0.0):
        return RadiusEstimate(0.0, infeasible=True)
    lo, hi = 0.0, 1.0
    while within(hi):
        lo = hi
        if hi >= cap:
            return RadiusEstimate(cap, saturated=True)
        hi = min(2.0 * hi, cap)
    while hi - lo > RHO_REL_TOL * hi:
        mid = 0.5 * (lo + hi)
        if within(mid):
            lo = mid
        else:
            hi = mid
    return RadiusEstimate(lo)


def coverage_lower_bound(
    div: DivergenceSpec, rho: float, rho_star: float, alpha: float, n: int
) -> float:
    """Marginal coverage guaranteed when calibrating at ``rho`` against true shift ``rho_star``."""
    if n < 1:
        raise InvalidArgumentError(f"n must be positive, got {n}")
    k = order_index(n, eval_g_inverse(div, rho, 1.0 - alpha))
    return eval_g(div, rho_star, min(1.0, k / (n + 1)))


def corrected_level(div: DivergenceSpec, rho: float, alpha: float, n: int) -> float:
    """Miscoverage level ``alpha_n`` whose robust set has exact finite-sample coverage."""
    if n < 1:
        raise InvalidArgumentError(f"n must be positive, got {n}")
    inflated = min(1.0, (1.0 + 1.0 / n) * eval_g_inverse(div, rho, 1.0 - alpha))
    return 1.0 - eval_g(div, rho, inflated)


def coverage_slack_constant(div: DivergenceSpec, rho: float, alpha: float, step: float = 1e-6) -> float:
    """``g_inv(1-alpha) * g'(g_inv(1-alpha))`` with a left finite-difference derivative."""
    if not rho > 0.0:
        raise InvalidArgumentError(f"rho must be positive, got {rho}")
    beta = eval_g_inverse(div, rho, 1.0 - alpha)
    if beta - step < 0.0:
        raise DegenerateError("left difference step leaves [0, 1]")
    slope = (eval_g(div, rho, beta) - eval_g(div, rho, beta - step)) / step
    return beta * slope
