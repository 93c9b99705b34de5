import json
import subprocess
import sys

import numpy as np
import pytest

from robust_conformal import divergence as dv
from robust_conformal.cli import main


def write_scores(path, values):
    path.write_text("score\n" + "".join(f"{float(v)!r}\n" for v in values))
    return str(path)


def write_features(path, x):
    x = np.atleast_2d(x)
    header = ",".join(f"x{j + 1}" for j in range(x.shape[1]))
    path.write_text(header + "\n" + "".join(",".join(repr(float(v)) for v in row) + "\n" for row in x))
    return str(path)


def write_joint(path, x, s):
    x = np.atleast_2d(x)
    header = ",".join(f"x{j + 1}" for j in range(x.shape[1])) + ",score"
    rows = "".join(",".join(repr(float(v)) for v in (*row, sc)) + "\n" for row, sc in zip(x, s))
    path.write_text(header + "\n" + rows)
    return str(path)


@pytest.fixture
def run(capsys):
    def _run(*argv):
        code = main([str(a) for a in argv])
        out, err = capsys.readouterr()
        return code, out, err

    return _run


@pytest.fixture
def hundred(tmp_path):
    return write_scores(tmp_path / "s.csv", np.arange(1.0, 101.0))


@pytest.fixture
def rows(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((120, 3))
    s = np.abs(np.exp(x[:, 0]) * rng.standard_normal(120))
    return write_features(tmp_path / "x.csv", x), write_scores(tmp_path / "sx.csv", s)


# --- gfun ---------------------------------------------------------------------------


def test_gfun_identity(run):
    code, out, _ = run("gfun", "--f", "chi2", "--rho", 0, "--beta", 0.9)
    assert code == 0
    assert out.splitlines() == ["beta,g,ginv", "0.9,0.9,0.9"]


def test_gfun_chi2_closed_form(run):
    _, out, _ = run("gfun", "--f", "chi2", "--rho", 0.5, "--beta", 0.95)
    g = float(out.splitlines()[1].split(",")[1])
    assert g == pytest.approx(0.732055, abs=1e-6)


def test_gfun_matches_library(run):
    _, out, _ = run("gfun", "--f", "kl", "--rho", 0.1, "--tau", 0.9)
    ginv = float(out.splitlines()[1].split(",")[2])
    lib = dv.eval_g_inverse(dv.kullback_leibler(), 0.1, 0.9)
    assert ginv == float(f"{lib:.12g}")
    assert abs(ginv - lib) <= 5e-13 * lib


def test_gfun_grid(run):
    _, out, _ = run("gfun", "--f", "kl", "--rho", 0.2, "--grid")
    lines = out.splitlines()
    assert len(lines) == 102 and lines[1].startswith("0,0,")


@pytest.mark.parametrize(
    "argv",
    [
        ["gfun", "--f", "tv", "--rho", "0", "--beta", "0.5"],
        ["gfun", "--f", "chi2", "--rho", "0", "--beta", "0.5", "--tau", "0.5"],
        ["gfun", "--f", "chi2", "--rho", "-1", "--beta", "0.5"],
        ["gfun", "--f", "chi2", "--rho", "0", "--beta", "1.5"],
    ],
)
def test_gfun_usage_errors(run, argv):
    with pytest.raises(SystemExit) as exc:
        code = main(argv)
        raise SystemExit(code)
    assert exc.value.code == 2


# --- calibrate ------------------------------------------------------------------------


def test_calibrate_split_threshold(run, hundred):
    code, out, _ = run("calibrate", "--scores", hundred, "--alpha", 0.05, "--rho", 0)
    assert code == 0
    res = json.loads(out)
    assert res["threshold_q"] == 96.0 and res["schema"] == 1 and res["corrected"] is False


def test_calibrate_corrected_flag(run, hundred):
    _, out, _ = run("calibrate", "--scores", hundred, "--alpha", 0.05, "--rho", 0, "--corrected")
    res = json.loads(out)
    assert res["corrected"] is True and res["threshold_q"] == 96.0


def test_calibrate_vacuous(run, hundred):
    _, out, _ = run("calibrate", "--scores", hundred, "--alpha", 0.05, "--rho", 5, "--corrected")
    res = json.loads(out)
    assert res["threshold_q"] is None and res["vacuous"] is True


def test_calibrate_csv_format(run, hundred):
    _, out, _ = run("calibrate", "--scores", hundred, "--alpha", 0.05, "--rho", 0.1, "--format", "csv")
    header, values = out.splitlines()
    fields = dict(zip(header.split(","), values.split(",")))
    assert fields["method"] == "robust" and float(fields["threshold_q"]) > 96


def test_calibrate_estimate_deterministic(run, rows, tmp_path):
    x, s = rows
    outs = []
    for i in range(2):
        out_path = tmp_path / f"cal{i}.json"
        code, _, _ = run("calibrate", "--scores", s, "--features", x, "--alpha", 0.1,
                         "--estimate", "sample", "--k", 20, "--seed", 4, "--out", out_path)
        assert code == 0
        outs.append(out_path.read_bytes())
    assert outs[0] == outs[1]
    res = json.loads(outs[0])
    assert res["method"] == "estimate-sample"
    assert len(res["shift_estimate"]["per_direction_quantiles"]) == 20


@pytest.mark.parametrize("strategy", ["regress", "classify"])
def test_calibrate_fitted_direction(run, rows, strategy):
    x, s = rows
    code, out, _ = run("calibrate", "--scores", s, "--features", x, "--alpha", 0.1,
                       "--estimate", strategy, "--seed", 1)
    assert code == 0
    res = json.loads(out)
    assert res["n"] == 60 and len(res["shift_estimate"]["direction"]) == 3


def test_calibrate_joint_file_and_global_seed(run, tmp_path):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((80, 2))
    path = write_joint(tmp_path / "j.csv", x, rng.random(80))
    code, out, _ = run("--seed", 3, "calibrate", "--data", path, "--alpha", 0.1, "--estimate", "sample", "--k", 5)
    assert code == 0 and json.loads(out)["method"] == "estimate-sample"


def test_calibrate_requires_seed(run, rows):
    x, s = rows
    code, _, err = run("calibrate", "--scores", s, "--features", x, "--alpha", 0.1, "--estimate", "sample")
    assert code == 2 and "--seed" in err


def test_calibrate_degenerate_direction(run, tmp_path):
    x = write_features(tmp_path / "x.csv", np.random.default_rng(0).standard_normal((40, 2)))
    s = write_scores(tmp_path / "s.csv", np.ones(40))
    code, _, err = run("calibrate", "--scores", s, "--features", x, "--alpha", 0.1,
                       "--estimate", "classify", "--seed", 0)
    assert code == 4 and err.count("\n") == 1


@pytest.mark.parametrize(
    "content, line",
    [("score\n1.0\nabc\n", ":3:"), ("score\n1.0\n2.0,3.0\n", ":3:"), ("value\n1.0\n", ":1:"), ("score\nnan\n", ":2:")],
)
def test_calibrate_malformed_input(run, tmp_path, content, line):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    code, _, err = run("calibrate", "--scores", path, "--alpha", 0.1, "--rho", 0.1)
    assert code == 3 and line in err


def test_calibrate_missing_file(run, tmp_path):
    code, _, _ = run("calibrate", "--scores", tmp_path / "nope.csv", "--alpha", 0.1, "--rho", 0)
    assert code == 3


def test_calibrate_rho_and_estimate_exclusive(run, hundred):
    with pytest.raises(SystemExit) as exc:
        main(["calibrate", "--scores", hundred, "--alpha", "0.1", "--rho", "0", "--estimate", "sample"])
    assert exc.value.code == 2


def test_calibrate_alpha_range(run, hundred):
    code, _, _ = run("calibrate", "--scores", hundred, "--alpha", 1.5, "--rho", 0)
    assert code == 2


# --- audit ------------------------------------------------------------------------------


def test_audit_six_point_example(run, tmp_path):
    x = write_features(tmp_path / "x.csv", np.arange(1.0, 7.0)[:, None])
    s = write_scores(tmp_path / "s.csv", [0.0, 0.0, 1.0, 1.0, 0.0, 0.0])
    code, out, _ = run("audit", "--features", x, "--scores", s, "--q", 0.5, "--delta", 1 / 3,
                       "--family", "slab", "--direction", "1")
    assert code == 0
    assert out.splitlines() == ["direction_id,coverage,mass,region_lo,region_hi", "0,0,0.333333333333,3,4"]


def test_audit_max_threshold_covers(run, rows, tmp_path):
    x, s = rows
    top = max(float(v) for v in open(s).read().split()[1:])
    code, out, _ = run("audit", "--features", x, "--scores", s, "--q", top, "--delta", 0.2,
                       "--family", "ball", "--sample", 7, "--seed", 0)
    assert code == 0
    assert [line.split(",")[1] for line in out.splitlines()[1:]] == ["1"] * 7


def test_audit_sample_deterministic(run, rows, tmp_path):
    x, s = rows
    files = []
    for i in range(2):
        path = tmp_path / f"a{i}.csv"
        run("audit", "--features", x, "--scores", s, "--q", 1.0, "--delta", 0.25,
            "--family", "halfspace", "--sample", 100, "--seed", 1, "--out", path)
        files.append(path.read_bytes())
    assert files[0] == files[1] and len(files[0].splitlines()) == 101


def test_audit_json_and_directions_file(run, rows, tmp_path):
    x, s = rows
    dirs = write_features(tmp_path / "d.csv", np.eye(3))
    code, out, _ = run("audit", "--features", x, "--scores", s, "--q", 1.0, "--delta", 0.25,
                       "--family", "halfspace", "--directions", dirs, "--format", "json")
    res = json.loads(out)
    assert code == 0 and len(res["rows"]) == 3 and res["rows"][0]["region_hi"] == "inf"


def test_audit_dimension_mismatch(run, rows):
    x, s = rows
    code, _, _ = run("audit", "--features", x, "--scores", s, "--q", 1.0, "--delta", 0.25,
                     "--family", "slab", "--direction", "1,0")
    assert code == 3


def test_audit_row_count_mismatch(run, tmp_path):
    x = write_features(tmp_path / "x.csv", np.zeros((5, 2)))
    s = write_scores(tmp_path / "s.csv", np.zeros(4))
    code, _, _ = run("audit", "--features", x, "--scores", s, "--q", 0, "--delta", 0.5,
                     "--family", "slab", "--direction", "1,0")
    assert code == 3


# --- simulate ---------------------------------------------------------------------------


def test_simulate_exchangeable_tilt(run, tmp_path):
    prefix = tmp_path / "rep"
    code, out, _ = run("simulate", "--experiment", "tilt", "--a-grid", 0, "--methods", "sc",
                       "--trials", 10, "--seed", 0, "--out", prefix)
    assert code == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    (summary,) = rep["reports"]
    assert 0.94 <= summary["mean_coverage"] <= 0.97
    csv_lines = (tmp_path / "rep.csv").read_text().splitlines()
    assert len(csv_lines) == 1 + 10 + 1
    assert out.startswith("sc [a=0] coverage=")


def test_simulate_hetero_no_shift(run, tmp_path):
    code, out, _ = run("simulate", "--experiment", "hetero", "--t", 0, "--shift", 0,
                       "--methods", "sc,chi2-s", "--trials", 6, "--k", 100, "--seed", 2)
    assert code == 0
    for line in out.splitlines():
        cov = float(line.split("coverage=")[1].split()[0])
        assert cov >= 0.94


def test_simulate_unknown_method(run):
    code, _, err = run("simulate", "--experiment", "tilt", "--methods", "sc,bogus", "--seed", 1)
    assert code == 2 and "chi2-fixed" in err


def test_simulate_total_failure_exit(run):
    code, _, _ = run("simulate", "--experiment", "hetero", "--methods", "chi2-r", "--n", 12,
                     "--trials", 2, "--seed", 1)
    assert code == 5


def test_simulate_deterministic_bytes(run, tmp_path):
    for i in range(2):
        run("simulate", "--experiment", "tilt", "--a-grid", "0,0.3", "--methods", "sc,kl-fixed",
            "--trials", 3, "--n", 300, "--n-test", 300, "--seed", 9, "--out", tmp_path / f"r{i}")
    assert (tmp_path / "r0.json").read_bytes() == (tmp_path / "r1.json").read_bytes()
    assert (tmp_path / "r0.csv").read_bytes() == (tmp_path / "r1.csv").read_bytes()


def test_module_entry_point(hundred):
    proc = subprocess.run(
        [sys.executable, "-m", "robust_conformal", "calibrate", "--scores", hundred, "--alpha", "0.05", "--rho", "0"],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0 and json.loads(proc.stdout)["threshold_q"] == 96.0
