"""Synthetic shift studies and Monte Carlo coverage reports.

Two experiment kinds share one calibration/evaluation pipeline:

``hetero``
    Validation rows from the regression model ``Y = X theta0 + h(v'X) eps``
    with ``X ~ N(0, I)``; test rows from the same model with ``X`` shifted.
    Scores use the possibly misspecified coefficients
    ``theta_t = sqrt(1 - t^2) theta0 + t theta1``.
``tilt``
    Validation and test halves of one pool (synthetic or caller supplied);
    the test half is resampled with weights ``exp(a v'(x - mean))`` along
    its top principal direction for each ``a`` in a grid.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import divergence as dv
from .conformal import CalibrationResult, robust_threshold, split_conformal
from .errors import InvalidArgumentError
from .scores import EmpiricalScores
from .shift import (
    FittedDirectionConfig,
    SampledDirectionsConfig,
    as_calibration,
    calibration_size,
    estimate_by_classification_direction,
    estimate_by_regression_direction,
    estimate_by_sampled_directions,
)
from .worst_coverage import TabularDataset

NOISE_SCALES = {
    "exp": np.exp,
    "softplus": lambda t: np.logaddexp(0.0, t),
    "relu1": lambda t: np.maximum(t, 0.0) + 1.0,
    "constant": lambda t: np.ones_like(t),
}
SCORE_KINDS = ("squared", "absolute", "raw")


def orthonormal_pair(d: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two orthonormal vectors in ``R^d`` drawn uniformly (Gram-Schmidt on Gaussians)."""
    if d < 2:
        raise InvalidArgumentError("an orthonormal pair needs d >= 2")
    g = np.random.default_rng(seed).standard_normal((2, d))
    a = g[0] / np.linalg.norm(g[0])
    b = g[1] - (g[1] @ a) * a
    return a, b / np.linalg.norm(b)


@dataclass(frozen=True)
class HeteroModel:
    theta0: np.ndarray
    theta1: np.ndarray
    v_var: np.ndarray
    noise: str = "exp"
    t: float = 0.0

    def __post_init__(self) -> None:
        th0 = np.asarray(self.theta0, dtype=float)
        th1 = np.asarray(self.theta1, dtype=float)
        v = np.asarray(self.v_var, dtype=float)
        if not (th0.shape == th1.shape == v.shape and th0.ndim == 1):
            raise InvalidArgumentError("theta0, theta1 and v_var must be d-vectors")
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise InvalidArgumentError("v_var must have unit norm")
        if (
            abs(np.linalg.norm(th0) - 1.0) > 1e-9
            or abs(np.linalg.norm(th1) - 1.0) > 1e-9
            or abs(th0 @ th1) > 1e-9
        ):
            raise InvalidArgumentError("theta0 and theta1 must be orthonormal")
        if self.noise not in NOISE_SCALES:
            raise InvalidArgumentError(f"unknown noise scale {self.noise!r}")
        probe = NOISE_SCALES[self.noise](np.linspace(-5.0, 5.0, 101))
        if np.any(probe <= 0) or np.any(np.diff(probe) < 0):
            raise InvalidArgumentError(f"noise scale {self.noise!r} must be positive and nondecreasing")
        if not 0.0 <= self.t <= 1.0:
            raise InvalidArgumentError(f"misspecification t must lie in [0, 1], got {self.t}")
        object.__setattr__(self, "theta0", th0)
        object.__setattr__(self, "theta1", th1)
        object.__setattr__(self, "v_var", v)

    @classmethod
    def standard(cls, d: int = 10, t: float = 0.0, noise: str = "exp", theta_seed: int = 0) -> "HeteroModel":
        """Noise along ``e1`` and a seeded random orthonormal coefficient pair."""
        theta0, theta1 = orthonormal_pair(d, theta_seed)
        v = np.zeros(d)
        v[0] = 1.0
        return cls(theta0, theta1, v, noise, t)

    @property
    def d(self) -> int:
        return self.theta0.size

    @property
    def theta_t(self) -> np.ndarray:
        return math.sqrt(1.0 - self.t**2) * self.theta0 + self.t * self.theta1


def generate_hetero(
    model: HeteroModel,
    n: int,
    shift_mean=None,
    seed=0,
    score: str = "squared",
) -> TabularDataset:
    """Rows ``X ~ N(shift_mean, I)`` with residual scores against ``theta_t``."""
    if n < 1:
        raise InvalidArgumentError(f"n must be positive, got {n}")
    if score not in ("squared", "absolute"):
        raise InvalidArgumentError(f"unknown score {score!r}")
    rng = np.random.default_rng(seed)
    mean = np.zeros(model.d) if shift_mean is None else np.asarray(shift_mean, dtype=float)
    x = rng.standard_normal((n, model.d)) + mean
    eps = rng.standard_normal(n)
    y = x @ model.theta0 + NOISE_SCALES[model.noise](x @ model.v_var) * eps
    resid = y - x @ model.theta_t
    return TabularDataset(x, resid**2 if score == "squared" else np.abs(resid))


@dataclass(frozen=True)
class TiltSpec:
    """Exponential tilt ``w(x) = exp(a v'(x - center))``; ``None`` fields are data-derived."""

    a: float
    direction: np.ndarray | None = None
    center: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.direction is not None:
            v = np.asarray(self.direction, dtype=float)
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise InvalidArgumentError("tilt direction must have unit norm")
            object.__setattr__(self, "direction", v)


def top_principal_direction(features: np.ndarray, iterations: int = 200) -> np.ndarray:
    """Leading eigenvector of the sample covariance by power iteration.

    Starts from the normalized column variances; the sign is fixed so the
    largest-magnitude entry is positive.  Warns when the last iterate still
    moves by more than 1e-6, which signals a near-tied top eigenvalue.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidArgumentError("need an n x d feature matrix with n >= 2")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    v = np.diag(cov).copy()
    if not np.linalg.norm(v) > 0:
        v = np.ones(cov.shape[0])
    v /= np.linalg.norm(v)
    change = 0.0
    for _ in range(iterations):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        w /= norm
        change = float(np.linalg.norm(w - v))
        v = w
    if change > 1e-6:
        warnings.warn(
            f"power iteration not settled (last step {change:.2e}); top eigenvalues may be tied",
            RuntimeWarning,
            stacklevel=2,
        )
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return v


def tilt_probabilities(features: np.ndarray, tilt: TiltSpec) -> np.ndarray:
    """Normalized tilt weights, computed in log space."""
    x = np.asarray(features, dtype=float)
    v = top_principal_direction(x) if tilt.direction is None else tilt.direction
    c = x.mean(axis=0) if tilt.center is None else np.asarray(tilt.center, dtype=float)
    logw = tilt.a * ((x - c) @ v)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def exponential_tilt_resample(data: TabularDataset, tilt: TiltSpec, m: int, seed) -> TabularDataset:
    """Draw ``m`` rows with replacement, row ``i`` with probability proportional to ``w(x_i)``."""
    if m < 1:
        raise InvalidArgumentError(f"m must be positive, got {m}")
    p = tilt_probabilities(data.features, tilt)
    rows = np.random.default_rng(seed).choice(data.n, size=m, replace=True, p=p)
    return data.subset(rows)


def realized_divergence(weights, div: dv.DivergenceSpec) -> float:
    """``D_f(P || Uniform_n)`` for ``P`` proportional to ``weights``."""
    w = np.asarray(weights, dtype=float).ravel()
    if np.any(w < 0):
        raise InvalidArgumentError("weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise InvalidArgumentError("weights must have a positive sum")
    n = w.size
    ratios = n * (w / total)
    return float(sum(div(float(r)) for r in ratios) / n)


# ---------------------------------------------------------------------------
# Experiments


def method_names() -> list[str]:
    names = ["sc"]
    for div in ("chi2", "kl"):
        names += [f"{div}-fixed", f"{div}-fixed-corr", f"{div}-s", f"{div}-r", f"{div}-c"]
    return names


def set_size(threshold: float, score: str) -> float:
    if math.isinf(threshold):
        return math.inf
    if score == "squared":
        return 2.0 * math.sqrt(max(threshold, 0.0))
    if score == "absolute":
        return 2.0 * threshold
    return threshold


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    methods: tuple[str, ...]
    trials: int
    seed: int
    alpha: float = 0.05
    n: int = 2000
    n_test: int = 2000
    d: int = 10
    t: float = 0.0
    shift: float = 0.0
    noise: str = "constant"
    theta_seed: int = 0
    score: str = "squared"
    a_grid: tuple[float, ...] = (0.0,)
    rho: float = 0.01
    k: int = 500
    delta: float = 1.0 / 3.0
    level_v: float = 0.05
    family: str = "slab"
    split_fraction: float = 0.5
    data: TabularDataset | None = field(default=None, repr=False, compare=False)
    workers: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("hetero", "tilt"):
            raise InvalidArgumentError(f"unknown experiment kind {self.kind!r}")
        if self.trials < 1:
            raise InvalidArgumentError("trials must be at least 1")
        unknown = [m for m in self.methods if m not in method_names()]
        if unknown or not self.methods:
            raise InvalidArgumentError(
                f"unknown methods {unknown}; valid: {', '.join(method_names())}"
            )
        if self.score not in SCORE_KINDS:
            raise InvalidArgumentError(f"unknown score kind {self.score!r}")
        if self.score == "raw" and self.data is None:
            raise InvalidArgumentError("raw scores need external data; generated rows are residuals")

    def describe(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "data"}
        out["methods"] = list(self.methods)
        out["a_grid"] = list(self.a_grid)
        out["external_data"] = self.data is not None
        return out


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    method: str
    setting: str
    coverage: float | None
    set_size: float | None
    rho_used: float | None
    realized_divergence: float | None = None
    plugin_divergence: float | None = None
    error: str | None = None


@dataclass(frozen=True)
class CoverageReport:
    method: str
    setting: str
    rho_used: float
    alpha: float
    mean_coverage: float
    coverage_deciles: list[float]
    mean_set_size: float
    trials: int
    failures: int = 0
    realized_divergence: float | None = None
    plugin_divergence: float | None = None
    coverage_se: float = 0.0


def calibrate_method(
    method: str, val: TabularDataset, spec: ExperimentSpec, seed
) -> CalibrationResult:
    """Calibrate one named method on validation rows."""
    scores = EmpiricalScores(val.scores)
    if method == "sc":
        return split_conformal(scores, spec.alpha)
    div_name, _, strategy = method.partition("-")
    div = dv.by_name(div_name)
    if strategy in ("fixed", "fixed-corr"):
        return robust_threshold(div, scores, spec.rho, spec.alpha, corrected=strategy == "fixed-corr")
    if strategy == "s":
        cfg = SampledDirectionsConfig(
            k=spec.k, level_v=spec.level_v, delta=spec.delta, alpha=spec.alpha,
            seed=seed, family=spec.family,
        )
        est = estimate_by_sampled_directions(val, cfg, div)
        return as_calibration(est, div, spec.alpha, val.n)
    cfg = FittedDirectionConfig(
        delta=spec.delta, alpha=spec.alpha, seed=seed, split_fraction=spec.split_fraction
    )
    fit = estimate_by_regression_direction if strategy == "r" else estimate_by_classification_direction
    est = fit(val, cfg, div)
    return as_calibration(est, div, spec.alpha, calibration_size(val.n, spec.split_fraction))


def _trial_data(spec: ExperimentSpec, trial: int):
    """Validation rows and a list of (setting, test rows, weight div, plug-in div)."""
    base = [spec.seed, trial]
    if spec.kind == "hetero":
        model = HeteroModel.standard(spec.d, spec.t, spec.noise, spec.theta_seed)
        val = generate_hetero(model, spec.n, None, base + [0], score=spec.score)
        shift = np.zeros(spec.d)
        shift[0] = spec.shift
        test = generate_hetero(model, spec.n_test, shift, base + [1], score=spec.score)
        return val, [(f"t={spec.t:g},shift={spec.shift:g}", test, None, None)]

    if spec.data is not None:
        pool = spec.data
        perm = np.random.default_rng(base + [0]).permutation(pool.n)
        half = pool.n // 2
        val, test_base = pool.subset(perm[:half]), pool.subset(perm[half:])
    else:
        model = HeteroModel.standard(spec.d, spec.t, spec.noise, spec.theta_seed)
        val = generate_hetero(model, spec.n, None, base + [0], score=spec.score)
        test_base = generate_hetero(model, spec.n_test, None, base + [1], score=spec.score)
    chi2 = dv.chi_square()
    with warnings.catch_warnings():
        if spec.data is None:
            # Generated features are isotropic; every axis is an equally valid tilt.
            warnings.simplefilter("ignore", RuntimeWarning)
        direction = top_principal_direction(test_base.features)
    tests = []
    for j, a in enumerate(spec.a_grid):
        tilt = TiltSpec(a, direction=direction)
        p = tilt_probabilities(test_base.features, tilt)
        rows = np.random.default_rng(base + [2, j]).choice(test_base.n, size=test_base.n, p=p)
        counts = np.bincount(rows, minlength=test_base.n)
        tests.append(
            (
                f"a={a:g}",
                test_base.subset(rows),
                realized_divergence(p, chi2),
                realized_divergence(counts, chi2),
            )
        )
    return val, tests


def run_trial(spec: ExperimentSpec, trial: int) -> list[TrialRecord]:
    val, tests = _trial_data(spec, trial)
    records = []
    for method_index, method in enumerate(spec.methods):
        try:
            result = calibrate_method(method, val, spec, [spec.seed, trial, 3, method_index])
        except Exception as exc:  # recorded per method; other methods continue
            for setting, _, wdiv, pdiv in tests:
                records.append(
                    TrialRecord(trial, method, setting, None, None, None, wdiv, pdiv,
                                f"{type(exc).__name__}: {exc}")
                )
            continue
        for setting, test, wdiv, pdiv in tests:
            covered = float(np.mean(test.scores <= result.threshold_q))
            records.append(
                TrialRecord(
                    trial, method, setting, covered,
                    set_size(result.threshold_q, spec.score), result.rho, wdiv, pdiv,
                )
            )
    return records


def _mean_or_none(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(spec: ExperimentSpec, records: list[TrialRecord]) -> list[CoverageReport]:
    records = sorted(records, key=lambda r: r.trial)
    settings = list(dict.fromkeys(r.setting for r in records))
    reports = []
    for method in spec.methods:
        for setting in settings:
            group = [r for r in records if r.method == method and r.setting == setting]
            ok = [r for r in group if r.error is None]
            wdivs = [r.realized_divergence for r in group if r.realized_divergence is not None]
            pdivs = [r.plugin_divergence for r in group if r.plugin_divergence is not None]
            if ok:
                cov = np.array([r.coverage for r in ok])
                deciles = [float(v) for v in np.quantile(cov, np.arange(1, 10) / 10)]
                se = float(cov.std(ddof=1) / math.sqrt(cov.size)) if cov.size > 1 else 0.0
                mean_cov = float(cov.mean())
                mean_size = float(np.mean([r.set_size for r in ok]))
                rho_used = float(np.mean([r.rho_used for r in ok]))
            else:
                deciles, se = [math.nan] * 9, math.nan
                mean_cov = mean_size = rho_used = math.nan
            reports.append(
                CoverageReport(
                    method=method,
                    setting=setting,
                    rho_used=rho_used,
                    alpha=spec.alpha,
                    mean_coverage=mean_cov,
                    coverage_deciles=deciles,
                    mean_set_size=mean_size,
                    trials=len(ok),
                    failures=len(group) - len(ok),
                    realized_divergence=float(np.median(wdivs)) if wdivs else None,
                    plugin_divergence=float(np.median(pdivs)) if pdivs else None,
                    coverage_se=se,
                )
            )
    return reports


def run_coverage_experiment(spec: ExperimentSpec) -> tuple[list[CoverageReport], list[TrialRecord]]:
    """Run all trials (optionally in worker processes) and aggregate per method and setting."""
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            chunks = list(pool.map(run_trial, [spec] * spec.trials, range(spec.trials)))
    else:
        chunks = [run_trial(spec, trial) for trial in range(spec.trials)]
    records = [r for chunk in chunks for r in chunk]
    return aggregate(spec, records), records
