"""Choosing the protection radius from plausible covariate shifts.

Three estimators, all ending the same way: find a score threshold ``q_hat``
that keeps worst-case coverage over the relevant regions at ``1 - alpha``,
then convert it to the smallest radius whose robust quantile reaches it.

* sampled directions -- random unit directions, ``q_hat`` is an upper order
  statistic of the per-direction worst quantiles;
* regression direction -- least-squares fit of score on features picks one
  direction on a first half of the data, ``q_hat`` is computed on the
  second half over halfspaces along it;
* classification direction -- as above with a logistic separator of
  high- versus low-score rows instead of least squares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conformal import CalibrationResult
from .divergence import DivergenceSpec, eval_g_inverse, rho_for_threshold
from .errors import DegenerateDirectionError, InvalidArgumentError
from .scores import EmpiricalScores
from .worst_coverage import (
    RegionFamily,
    RegionQuery,
    TabularDataset,
    min_count,
    worst_quantile_for_direction,
)


@dataclass(frozen=True)
class SampledDirectionsConfig:
    k: int
    level_v: float
    delta: float
    alpha: float
    seed: int
    family: RegionFamily = RegionFamily.SLAB

    def __post_init__(self) -> None:
        if self.k < 1:
            raise InvalidArgumentError(f"k must be at least 1, got {self.k}")
        for name in ("level_v", "delta", "alpha"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise InvalidArgumentError(f"{name} must lie in (0, 1), got {value}")
        object.__setattr__(self, "family", RegionFamily.parse(self.family))


@dataclass(frozen=True)
class FittedDirectionConfig:
    delta: float
    alpha: float
    seed: int
    split_fraction: float = 0.5
    ridge: float = 1e-8

    def __post_init__(self) -> None:
        for name in ("split_fraction", "delta", "alpha"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise InvalidArgumentError(f"{name} must lie in (0, 1), got {value}")
        if self.ridge < 0:
            raise InvalidArgumentError(f"ridge must be nonnegative, got {self.ridge}")


@dataclass(frozen=True)
class ShiftEstimate:
    q_hat: float
    rho_hat: float
    saturated: bool = False
    infeasible: bool = False
    direction: np.ndarray | None = None
    per_direction_quantiles: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "q_hat": self.q_hat,
            "rho_hat": self.rho_hat,
            "saturated": self.saturated,
            "infeasible": self.infeasible,
        }
        if self.direction is not None:
            out["direction"] = [float(v) for v in self.direction]
        if self.per_direction_quantiles is not None:
            out["per_direction_quantiles"] = [float(v) for v in self.per_direction_quantiles]
        return out


def sample_unit_directions(d: int, k: int, seed: int) -> np.ndarray:
    """``k`` i.i.d. uniform directions on the unit sphere in ``R^d`` (rows)."""
    if d < 1 or k < 1:
        raise InvalidArgumentError(f"need d >= 1 and k >= 1, got d={d}, k={k}")
    g = np.random.default_rng(seed).standard_normal((k, d))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # A draw of exactly zero has probability zero; redraw-free guard.
    norms[norms == 0.0] = 1.0
    return g / norms


def _finish(div: DivergenceSpec, alpha: float, scores, q_hat: float, **extra) -> ShiftEstimate:
    radius = rho_for_threshold(div, alpha, EmpiricalScores(scores), q_hat)
    return ShiftEstimate(
        q_hat=float(q_hat),
        rho_hat=radius.rho,
        saturated=radius.saturated,
        infeasible=radius.infeasible,
        **extra,
    )


def estimate_by_sampled_directions(
    data: TabularDataset,
    cfg: SampledDirectionsConfig,
    div: DivergenceSpec,
    directions: np.ndarray | None = None,
) -> ShiftEstimate:
    """Threshold covering all delta-regions for a ``1 - level_v`` share of sampled directions.

    ``directions`` (k x d) overrides the sampler; ball regions use them as centers.
    """
    if directions is None:
        directions = sample_unit_directions(data.d, cfg.k, cfg.seed)
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    quantiles = np.array(
        [
            worst_quantile_for_direction(data, RegionQuery.along(cfg.family, v, cfg.delta), cfg.alpha)
            for v in directions
        ]
    )
    k = quantiles.size
    rank = max(1, math.ceil(k * (1.0 - cfg.level_v) - 1e-9))
    q_hat = float(np.sort(quantiles)[rank - 1])
    return _finish(div, cfg.alpha, data.scores, q_hat, per_direction_quantiles=quantiles)


def _split(data: TabularDataset, cfg: FittedDirectionConfig) -> tuple[TabularDataset, TabularDataset]:
    perm = np.random.default_rng(cfg.seed).permutation(data.n)
    n1 = data.n - calibration_size(data.n, cfg.split_fraction)
    first, second = data.subset(perm[:n1]), data.subset(perm[n1:])
    if first.n < data.d:
        raise InvalidArgumentError(f"fitting half has {first.n} rows for {data.d} features")
    if second.n < 1:
        raise InvalidArgumentError("calibration half is empty")
    return first, second


def least_squares_direction(features: np.ndarray, scores: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    """Unit vector along the ridge-stabilized least-squares fit of scores on features."""
    gram = features.T @ features
    moment = features.T @ scores
    scale = np.linalg.norm(features) * np.linalg.norm(scores)
    if scale == 0.0 or np.linalg.norm(moment) <= 1e-12 * scale:
        raise DegenerateDirectionError("scores are uncorrelated with every feature")
    lam = ridge * np.trace(gram) / gram.shape[0]
    v = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), moment)
    norm = np.linalg.norm(v)
    if not norm > 0.0:
        raise DegenerateDirectionError("least-squares direction is zero")
    return v / norm


def logistic_direction(
    features: np.ndarray,
    labels: np.ndarray,
    reg: float = 1e-3,
    iterations: int = 500,
) -> np.ndarray:
    """Unit weight vector of an L2-regularized logistic separator (intercept excluded).

    Plain gradient descent from zero with step ``1/L``, ``L`` the smoothness
    constant ``lambda_max(Z'Z/n)/4 + reg`` of the objective.
    """
    n = features.shape[0]
    z = np.hstack([features, np.ones((n, 1))])
    signed = np.where(labels, 1.0, -1.0)
    smooth = np.linalg.eigvalsh(z.T @ z / n)[-1] / 4.0 + reg
    step = 1.0 / smooth
    w = np.zeros(z.shape[1])
    for _ in range(iterations):
        margin = signed * (z @ w)
        # d/dm log(1 + exp(-m)) = -1 / (1 + exp(m)), computed without overflow.
        weight = -np.exp(-np.logaddexp(0.0, margin))
        grad = z.T @ (weight * signed) / n + reg * w
        w -= step * grad
    v = w[:-1]
    norm = np.linalg.norm(v)
    if not norm > 0.0:
        raise DegenerateDirectionError("logistic separator has zero weight vector")
    return v / norm


def _calibrate_along(
    second: TabularDataset, direction: np.ndarray, cfg: FittedDirectionConfig, div: DivergenceSpec
) -> ShiftEstimate:
    if min_count(second.n, cfg.delta) > second.n:
        raise InvalidArgumentError("calibration half too small for delta")
    query = RegionQuery.along(RegionFamily.HALFSPACE, direction, cfg.delta)
    q_hat = worst_quantile_for_direction(second, query, cfg.alpha)
    return _finish(div, cfg.alpha, second.scores, q_hat, direction=query.vector)


def estimate_by_regression_direction(
    data: TabularDataset, cfg: FittedDirectionConfig, div: DivergenceSpec
) -> ShiftEstimate:
    """Worst direction from least squares on one half, threshold from the other."""
    first, second = _split(data, cfg)
    direction = least_squares_direction(first.features, first.scores, cfg.ridge)
    return _calibrate_along(second, direction, cfg, div)


def estimate_by_classification_direction(
    data: TabularDataset, cfg: FittedDirectionConfig, div: DivergenceSpec
) -> ShiftEstimate:
    """Worst direction from a logistic split of scores at their median."""
    first, second = _split(data, cfg)
    labels = first.scores >= np.median(first.scores)
    if labels.all() or not labels.any():
        raise DegenerateDirectionError("all fitting scores are equal; no median split")
    direction = logistic_direction(first.features, labels)
    return _calibrate_along(second, direction, cfg, div)


def as_calibration(est: ShiftEstimate, div: DivergenceSpec, alpha: float, n: int) -> CalibrationResult:
    """The prediction-set rule an estimate stands for.

    On the calibration scores the robust set at ``rho_hat`` and the set
    ``{S <= q_hat}`` coincide, so ``q_hat`` is the threshold.
    """
    return CalibrationResult(
        threshold_q=est.q_hat,
        rho=est.rho_hat,
        alpha=alpha,
        effective_level=eval_g_inverse(div, est.rho_hat, 1.0 - alpha),
        corrected=False,
        divergence_name=div.name,
        n=n,
    )


def calibration_size(n: int, split_fraction: float) -> int:
    """Rows left for calibration after the direction-fitting split."""
    return n - int(round(split_fraction * n))
