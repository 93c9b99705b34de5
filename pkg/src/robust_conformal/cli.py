"""Command-line interface: ``robust-conformal {gfun,calibrate,audit,simulate}``.

Exit codes: 0 ok, 2 usage, 3 bad input, 4 numerically degenerate, 5 experiment failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import divergence as dv
from .conformal import robust_threshold, split_conformal
from .errors import DegenerateError, InvalidArgumentError
from .scores import EmpiricalScores
from .shift import (
    FittedDirectionConfig,
    SampledDirectionsConfig,
    as_calibration,
    calibration_size,
    estimate_by_classification_direction,
    estimate_by_regression_direction,
    estimate_by_sampled_directions,
    sample_unit_directions,
)
from .simulation import ExperimentSpec, method_names, run_coverage_experiment
from .worst_coverage import RegionQuery, TabularDataset, worst_coverage

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_DEGENERATE, EXIT_EXPERIMENT = 0, 2, 3, 4, 5
SCHEMA_VERSION = 1


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def fmt(x: float) -> str:
    return f"{x:.12g}"


# ---------------------------------------------------------------------------
# Input files


def _read_table(path: str) -> tuple[list[str], np.ndarray]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc.strerror}") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise CliError(EXIT_INPUT, f"{path}: empty file") from None
    rows = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise CliError(EXIT_INPUT, f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
        try:
            values = [float(c) for c in row]
        except ValueError:
            raise CliError(EXIT_INPUT, f"{path}:{line_no}: non-numeric field") from None
        if any(math.isnan(v) for v in values):
            raise CliError(EXIT_INPUT, f"{path}:{line_no}: NaN not allowed")
        rows.append(values)
    if not rows:
        raise CliError(EXIT_INPUT, f"{path}: no data rows")
    return header, np.array(rows)


def _feature_columns(header: list[str], path: str) -> list[int]:
    cols = [i for i, h in enumerate(header) if h != "score"]
    expected = [f"x{j + 1}" for j in range(len(cols))]
    if [header[i] for i in cols] != expected:
        raise CliError(EXIT_INPUT, f"{path}:1: feature header must be {','.join(expected)}")
    return cols


def read_scores(path: str) -> np.ndarray:
    header, table = _read_table(path)
    if "score" not in header:
        raise CliError(EXIT_INPUT, f"{path}:1: missing 'score' column")
    return table[:, header.index("score")]


def read_features(path: str) -> np.ndarray:
    header, table = _read_table(path)
    return table[:, _feature_columns(header, path)]


def load_inputs(args, need_features: bool) -> tuple[np.ndarray, np.ndarray | None]:
    if args.data:
        header, table = _read_table(args.data)
        if "score" not in header:
            raise CliError(EXIT_INPUT, f"{args.data}:1: missing 'score' column")
        scores = table[:, header.index("score")]
        cols = _feature_columns(header, args.data)
        features = table[:, cols] if cols else None
    else:
        if not args.scores:
            raise CliError(EXIT_USAGE, "--scores or --data is required")
        scores = read_scores(args.scores)
        features = read_features(args.features) if args.features else None
    if need_features:
        if features is None:
            raise CliError(EXIT_USAGE, "--features (or feature columns in --data) required")
        if features.shape[0] != scores.size:
            raise CliError(EXIT_INPUT, f"{features.shape[0]} feature rows but {scores.size} scores")
    return scores, features


def _require_seed(args) -> int:
    if args.seed is None:
        raise CliError(EXIT_USAGE, "--seed is required for stochastic commands")
    return args.seed


def _emit(args, text: str) -> None:
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _check_unit(value: float, flag: str) -> None:
    if not 0.0 < value < 1.0:
        raise CliError(EXIT_USAGE, f"{flag} must lie in (0, 1), got {value}")


# ---------------------------------------------------------------------------
# Commands


def cmd_gfun(args) -> int:
    div = dv.by_name(args.f)
    if args.rho < 0:
        raise CliError(EXIT_USAGE, "--rho must be nonnegative")
    if args.grid:
        points = [i / 100 for i in range(101)]
    else:
        value = args.beta if args.beta is not None else args.tau
        if not 0.0 <= value <= 1.0:
            raise CliError(EXIT_USAGE, f"value must lie in [0, 1], got {value}")
        points = [value]
    lines = ["beta,g,ginv"]
    for p in points:
        lines.append(",".join(fmt(v) for v in (p, dv.eval_g(div, args.rho, p), dv.eval_g_inverse(div, args.rho, p))))
    _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    _check_unit(args.alpha, "--alpha")
    div = dv.by_name(args.f)
    scores, features = load_inputs(args, need_features=args.estimate is not None)
    out: dict = {"schema": SCHEMA_VERSION}
    if args.estimate is None:
        sample = EmpiricalScores(scores)
        if args.rho == 0.0 and not args.corrected:
            result = split_conformal(sample, args.alpha)
            out["method"] = "split"
        else:
            result = robust_threshold(div, sample, args.rho, args.alpha, corrected=args.corrected)
            out["method"] = "robust"
    else:
        seed = _require_seed(args)
        _check_unit(args.delta, "--delta")
        data = TabularDataset(features, scores)
        try:
            if args.estimate == "sample":
                _check_unit(args.level_v, "--level-v")
                cfg = SampledDirectionsConfig(
                    k=args.k, level_v=args.level_v, delta=args.delta, alpha=args.alpha,
                    seed=seed, family=args.family,
                )
                est = estimate_by_sampled_directions(data, cfg, div)
                n_calib = data.n
            else:
                cfg = FittedDirectionConfig(
                    delta=args.delta, alpha=args.alpha, seed=seed, split_fraction=args.split
                )
                fit = estimate_by_regression_direction if args.estimate == "regress" else estimate_by_classification_direction
                est = fit(data, cfg, div)
                n_calib = calibration_size(data.n, args.split)
        except DegenerateError as exc:
            raise CliError(EXIT_DEGENERATE, str(exc)) from None
        result = as_calibration(est, div, args.alpha, n_calib)
        out["method"] = f"estimate-{args.estimate}"
        out["shift_estimate"] = est.to_dict()
    out.update(result.to_dict())
    if args.format == "csv":
        flat = {k: v for k, v in out.items() if not isinstance(v, dict)}
        row = ["" if v is None else (fmt(v) if isinstance(v, float) else str(v)) for v in flat.values()]
        _emit(args, ",".join(flat) + "\n" + ",".join(row) + "\n")
    else:
        _emit(args, _json(out))
    return EXIT_OK


def _audit_directions(args, d: int) -> np.ndarray:
    given = sum(x is not None for x in (args.direction, args.directions, args.sample))
    if given != 1:
        raise CliError(EXIT_USAGE, "give exactly one of --direction, --directions, --sample")
    if args.direction is not None:
        try:
            dirs = np.array([[float(v) for v in args.direction.split(",")]])
        except ValueError:
            raise CliError(EXIT_USAGE, "--direction must be comma-separated numbers") from None
    elif args.directions is not None:
        dirs = read_features(args.directions)
    else:
        dirs = sample_unit_directions(d, args.sample, _require_seed(args))
    if dirs.shape[1] != d:
        raise CliError(EXIT_INPUT, f"direction dimension {dirs.shape[1]} does not match {d} features")
    return dirs


def cmd_audit(args) -> int:
    _check_unit(args.delta, "--delta")
    scores, features = load_inputs(args, need_features=True)
    data = TabularDataset(features, scores)
    rows = []
    for idx, v in enumerate(_audit_directions(args, data.d)):
        try:
            query = RegionQuery.along(args.family, v, args.delta)
        except InvalidArgumentError as exc:
            raise CliError(EXIT_INPUT, f"direction {idx}: {exc}") from None
        res = worst_coverage(data, query, args.q)
        rows.append((idx, res.coverage, res.mass, *res.region))
    if args.format == "json":
        keys = ("direction_id", "coverage", "mass", "region_lo", "region_hi")
        payload = {"schema": SCHEMA_VERSION, "rows": [_clean(dict(zip(keys, r))) for r in rows]}
        _emit(args, _json(payload))
    else:
        lines = ["direction_id,coverage,mass,region_lo,region_hi"]
        lines += [f"{r[0]}," + ",".join(fmt(v) for v in r[1:]) for r in rows]
        _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise CliError(EXIT_USAGE, f"expected comma-separated numbers, got {text!r}") from None


def _records_csv(reports, records) -> str:
    buf = io.StringIO()
    fields = ["method", "setting", "trial", "coverage", "set_size", "rho_used",
              "realized_divergence", "plugin_divergence", "error"]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)

    def cell(v):
        if v is None:
            return ""
        return fmt(v) if isinstance(v, float) else str(v)

    for r in sorted(records, key=lambda r: (r.method, r.setting, r.trial)):
        writer.writerow([cell(getattr(r, f)) for f in fields])
    for rep in reports:
        writer.writerow([rep.method, rep.setting, "all", cell(rep.mean_coverage), cell(rep.mean_set_size),
                         cell(rep.rho_used), cell(rep.realized_divergence), cell(rep.plugin_divergence),
                         f"failures={rep.failures}" if rep.failures else ""])
    return buf.getvalue()


def _clean(value):
    """JSON-safe copy: non-finite floats become strings."""
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def cmd_simulate(args) -> int:
    seed = _require_seed(args)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    unknown = [m for m in methods if m not in method_names()]
    if unknown or not methods:
        raise CliError(EXIT_USAGE, f"unknown method(s) {','.join(unknown) or '(none)'}; valid: {','.join(method_names())}")
    data = None
    if args.data:
        scores, features = load_inputs(args, need_features=True)
        data = TabularDataset(features, scores)
    spec = ExperimentSpec(
        kind=args.experiment, methods=methods, trials=args.trials, seed=seed,
        alpha=args.alpha, n=args.n, n_test=args.n_test, d=args.d, t=args.t, shift=args.shift,
        noise=args.noise, score=args.score, a_grid=_float_list(args.a_grid), rho=args.rho,
        k=args.k, delta=args.delta, level_v=args.level_v, family=args.family,
        split_fraction=args.split, data=data, workers=args.workers,
    )
    reports, records = run_coverage_experiment(spec)
    if args.out:
        payload = {
            "schema": SCHEMA_VERSION,
            "experiment": spec.describe(),
            "reports": [asdict(r) for r in reports],
            "trials": [asdict(r) for r in sorted(records, key=lambda r: (r.trial, r.method, r.setting))],
        }
        Path(f"{args.out}.json").write_text(_json(_clean(payload)), encoding="utf-8")
        Path(f"{args.out}.csv").write_text(_records_csv(reports, records), encoding="utf-8")
    for rep in reports:
        print(
            f"{rep.method} [{rep.setting}] coverage={fmt(rep.mean_coverage)} "
            f"size={fmt(rep.mean_set_size)} rho={fmt(rep.rho_used)} trials={rep.trials} failures={rep.failures}"
        )
    if any(rep.trials == 0 for rep in reports):
        return EXIT_EXPERIMENT
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        flags = argparse.ArgumentParser(add_help=False)
        flags.add_argument("--seed", type=int, default=default)
        flags.add_argument("--out", default=default, help="output path (prefix for simulate)")
        flags.add_argument("--format", choices=("json", "csv"), default=default)
        return flags

    # Accepted before or after the subcommand; the copy on each subcommand
    # must not overwrite a value given up front with its own default.
    top, common = global_flags(None), global_flags(argparse.SUPPRESS)

    inputs = argparse.ArgumentParser(add_help=False)
    inputs.add_argument("--scores", help="CSV with a 'score' column")
    inputs.add_argument("--features", help="CSV with columns x1,...,xd")
    inputs.add_argument("--data", help="CSV with columns x1,...,xd,score")

    parser = _Parser(prog="robust-conformal", parents=[top],
                     description="Distributionally robust conformal calibration.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gfun", parents=[common], help="tabulate g and its inverse")
    p.add_argument("--f", choices=("chi2", "kl"), required=True)
    p.add_argument("--rho", type=float, required=True)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--beta", type=float)
    which.add_argument("--tau", type=float)
    which.add_argument("--grid", action="store_true")
    p.set_defaults(func=cmd_gfun)

    p = sub.add_parser("calibrate", parents=[common, inputs], help="calibrate a threshold")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--f", choices=("chi2", "kl"), default="chi2")
    how = p.add_mutually_exclusive_group(required=True)
    how.add_argument("--rho", type=float)
    how.add_argument("--estimate", choices=("sample", "regress", "classify"))
    p.add_argument("--corrected", action="store_true")
    p.add_argument("--delta", type=float, default=1.0 / 3.0)
    p.add_argument("--level-v", type=float, default=0.05)
    p.add_argument("--k", type=int, default=500)
    p.add_argument("--family", choices=("slab", "halfspace", "ball"), default="slab")
    p.add_argument("--split", type=float, default=0.5)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("audit", parents=[common, inputs], help="worst coverage per direction")
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--family", choices=("slab", "halfspace", "ball"), required=True)
    p.add_argument("--direction")
    p.add_argument("--directions")
    p.add_argument("--sample", type=int)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("simulate", parents=[common, inputs], help="Monte Carlo coverage study")
    p.add_argument("--experiment", choices=("hetero", "tilt"), required=True)
    p.add_argument("--methods", default="sc")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--shift", type=float, default=0.0, help="test mean shift along e1")
    p.add_argument("--noise", choices=("constant", "exp", "softplus", "relu1"), default="constant")
    p.add_argument("--score", choices=("squared", "absolute", "raw"), default="squared",
                   help="'raw' only with --data: scores are used as given")
    p.add_argument("--a-grid", default="0")
    p.add_argument("--rho", type=float, default=0.01)
    p.add_argument("--k", type=int, default=500)
    p.add_argument("--delta", type=float, default=1.0 / 3.0)
    p.add_argument("--level-v", type=float, default=0.05)
    p.add_argument("--family", choices=("slab", "halfspace", "ball"), default="slab")
    p.add_argument("--split", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"robust-conformal: error: {exc}", file=sys.stderr)
        return exc.code
    except InvalidArgumentError as exc:
        print(f"robust-conformal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateError as exc:
        print(f"robust-conformal: error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
