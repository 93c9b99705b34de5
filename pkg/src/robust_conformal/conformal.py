"""Split-conformal and divergence-robust calibration of score thresholds."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .divergence import DivergenceSpec, eval_g, eval_g_inverse
from .errors import InvalidArgumentError
from .scores import EmpiricalScores, as_scores, empirical_quantile


@dataclass(frozen=True)
class CalibrationResult:
    """A calibrated prediction-set rule ``{y : S(x, y) <= threshold_q}``.

    ``effective_level`` is the quantile level actually read off the
    calibration scores.  When it exceeds 1 the threshold is ``+inf`` and
    the set is vacuous (always contains every label).
    """

    threshold_q: float
    rho: float
    alpha: float
    effective_level: float
    corrected: bool
    divergence_name: str
    n: int

    @property
    def vacuous(self) -> bool:
        return math.isinf(self.threshold_q) and self.threshold_q > 0

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.vacuous:
            out["threshold_q"] = None
        out["vacuous"] = self.vacuous
        return out


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")


def standard_split_threshold(scores: EmpiricalScores, alpha: float) -> float:
    """Exchangeable split-conformal threshold at level ``(1 + 1/n)(1 - alpha)``."""
    _check_alpha(alpha)
    scores = as_scores(scores)
    return empirical_quantile(scores, (1.0 + 1.0 / scores.n) * (1.0 - alpha))


def split_conformal(scores: EmpiricalScores, alpha: float) -> CalibrationResult:
    """Plain split conformal packaged as a :class:`CalibrationResult` (rho = 0)."""
    scores = as_scores(scores)
    level = (1.0 + 1.0 / scores.n) * (1.0 - alpha)
    return CalibrationResult(
        threshold_q=standard_split_threshold(scores, alpha),
        rho=0.0,
        alpha=alpha,
        effective_level=level,
        corrected=False,
        divergence_name="none",
        n=scores.n,
    )


def robust_threshold(
    div: DivergenceSpec,
    scores: EmpiricalScores,
    rho: float,
    alpha: float,
    corrected: bool = False,
) -> CalibrationResult:
    """Worst-case (1 - alpha)-quantile over the ``rho``-ball around the scores.

    With ``corrected=True`` the level is ``g_inv(1 - alpha_n)``, which equals
    ``(1 + 1/n) g_inv(1 - alpha)``; the latter form is used directly so the
    order statistic is not shifted by bisection round-off.
    """
    _check_alpha(alpha)
    scores = as_scores(scores)
    base = eval_g_inverse(div, rho, 1.0 - alpha)
    level = (1.0 + 1.0 / scores.n) * base if corrected else base
    threshold = math.inf if level > 1.0 else empirical_quantile(scores, level)
    return CalibrationResult(
        threshold_q=threshold,
        rho=float(rho),
        alpha=alpha,
        effective_level=level,
        corrected=corrected,
        divergence_name=div.name,
        n=scores.n,
    )


def prediction_set_contains(result: CalibrationResult, score_value: float) -> bool:
    return bool(score_value <= result.threshold_q)


def evaluate_coverage(result: CalibrationResult, test_scores) -> float:
    """Fraction of test scores inside the calibrated set."""
    values = as_scores(test_scores).values
    return float(np.count_nonzero(values <= result.threshold_q)) / values.size


def conditional_coverage_bound(
    div: DivergenceSpec,
    rho: float,
    alpha: float,
    scores: EmpiricalScores,
    f0_cdf_at_threshold: float,
    rho_star: float,
) -> float:
    """Coverage floor given the true CDF at the calibrated threshold.

    ``rho``, ``alpha`` and ``scores`` identify the calibrated rule; only the
    caller-supplied CDF value and the true shift ``rho_star`` enter the bound.
    """
    return eval_g(div, rho_star, f0_cdf_at_threshold)
