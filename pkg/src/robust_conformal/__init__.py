"""Distributionally robust conformal prediction.

Prediction-set thresholds that stay valid for every test distribution within
an f-divergence ball of the calibration distribution, and estimators of the
ball radius from plausible covariate shifts.
"""

from .conformal import (
    CalibrationResult,
    conditional_coverage_bound,
    evaluate_coverage,
    prediction_set_contains,
    robust_threshold,
    split_conformal,
    standard_split_threshold,
)
from .divergence import (
    DivergenceSpec,
    RadiusEstimate,
    chi_square,
    coverage_slack_constant,
    corrected_level,
    coverage_lower_bound,
    custom,
    eval_g,
    eval_g_inverse,
    kullback_leibler,
    rho_for_threshold,
    worst_case_cdf,
    worst_case_quantile,
)
from .errors import DegenerateDirectionError, DegenerateError, InvalidArgumentError, SizeGuardError
from .scores import EmpiricalScores, empirical_quantile
from .shift import (
    FittedDirectionConfig,
    SampledDirectionsConfig,
    ShiftEstimate,
    estimate_by_classification_direction,
    estimate_by_regression_direction,
    estimate_by_sampled_directions,
    sample_unit_directions,
)
from .worst_coverage import (
    RegionFamily,
    RegionQuery,
    TabularDataset,
    WorstCoverageResult,
    brute_force_worst_coverage,
    worst_coverage,
    worst_quantile_for_direction,
)

__version__ = "0.1.0"
