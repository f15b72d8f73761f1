"""
Verification Script for Plans and Pipelines

Checks the plan loader (defaults, errors with locations, sweep grids),
the verdict table, every pipeline end to end in a temporary directory,
and the command line exit codes.

Usage:
    python verify_experiments.py
"""

import json
import os
import sys
import tempfile
from pathlib import Path

from click.testing import CliRunner

# Add the package to the path so the script runs from the repo root
sys.path.append(os.getcwd())

import oracles
from regen_polling.errors import PlanParseError, PlanValidationError
from regen_polling.main import cli
from regen_polling.models import S0Estimate, S0Kind, TopExponent, Verdict
from regen_polling.services.experiments import decide_verdict, run_plan
from regen_polling.utils.output import read_csv_body
from regen_polling.utils.plan import load_plan, sweep_points

SYSTEM = """
system:
  d: 1
  lambda: [1.0, 1.0]
  discipline: exhaustive
station 0:
  - [0.5, 3.0, 0.0]
  - [0.5, 1.25, 0.0]
station 1:
  - [1.0, 3.0, 0.0]
"""

DETERMINISTIC = """
system:
  d: 1
  lambda: [1.0, 1.0]
station 0:
  - [1.0, {mu0}, 0.0]
station 1:
  - [1.0, {mu1}, 0.0]
"""

FAST_CLASSIFY = """
action:
  name: classify
  n: 16
  replicas: 2000
  n_top: 400
  replicas_top: 20
  s_max: 4.0
  grid_step: 0.5
"""


def write_plan(directory: str, text: str, name: str = "plan.yaml") -> Path:
    path = Path(directory) / name
    path.write_text(text)
    return path


def test_load_plan_fills_defaults():
    print("Testing plan defaults...")
    with tempfile.TemporaryDirectory() as tmp:
        plan = load_plan(write_plan(tmp, SYSTEM + "action:\n  name: classify\nseed: 42\n"))
    assert plan.seed == 42 and plan.action.name == "classify"
    assert plan.action.classify.n == 32 and plan.action.classify.confidence == 0.99
    assert plan.spec.nu[0].weights == (0.5, 0.5)
    assert plan.threads == 1
    print("Plan defaults passed!")


def test_cli_overrides_win():
    print("Testing override order...")
    with tempfile.TemporaryDirectory() as tmp:
        plan = load_plan(
            write_plan(tmp, SYSTEM + "action:\n  name: classify\nseed: 42\nthreads: 2\n"),
            seed=7, output_dir="elsewhere", threads=3,
        )
    assert plan.seed == 7 and plan.output_dir == "elsewhere" and plan.threads == 3
    print("Overrides passed!")


def test_missing_station_is_named():
    print("Testing a plan without station 1...")
    text = SYSTEM.split("station 1:")[0] + "action:\n  name: classify\n"
    with tempfile.TemporaryDirectory() as tmp:
        try:
            load_plan(write_plan(tmp, text))
        except PlanValidationError as e:
            assert e.field == "station 1", e.field
        else:
            raise AssertionError("a missing station should be rejected")
    print("Missing station passed!")


def test_parse_errors_carry_location():
    print("Testing malformed YAML...")
    with tempfile.TemporaryDirectory() as tmp:
        try:
            load_plan(write_plan(tmp, "system:\n  d: [1\n  lambda: 2\n"))
        except PlanParseError as e:
            assert e.line is not None and e.column is not None, str(e)
        else:
            raise AssertionError("malformed YAML should not load")

        try:
            load_plan(write_plan(tmp, SYSTEM + "action:\n  name: classify\ncolour: blue\n"))
        except PlanValidationError as e:
            assert e.field == "colour"
        else:
            raise AssertionError("unknown keys should be rejected")

        try:
            load_plan(write_plan(tmp, SYSTEM + "action:\n  name: classify\n  replicaz: 3\n"))
        except PlanValidationError as e:
            assert e.field.startswith("action"), e.field
        else:
            raise AssertionError("unknown action parameters should be rejected")

        bad_spec = SYSTEM.replace("[0.5, 1.25, 0.0]", "[0.5, 0.75, 0.0]") + "action:\n  name: classify\n"
        try:
            load_plan(write_plan(tmp, bad_spec))
        except PlanValidationError as e:
            assert e.field == "station 0", e.field
        else:
            raise AssertionError("mu below the arrival rate should be rejected")
    print("Parse errors passed!")


def test_sweep_grid_skips_unstable_points():
    print("Testing sweep grid resolution...")
    text = SYSTEM.replace("lambda: [1.0, 1.0]", "lambda: [1.5, 1.0]").replace("1.25", "2.0") + """
action:
  name: sweep
  axis:
    station: 0
    atom: 1
    field: mu
    start: 1.1
    stop: 3.0
    step: 0.1
"""
    with tempfile.TemporaryDirectory() as tmp:
        plan = load_plan(write_plan(tmp, text))
    points = sweep_points(plan.spec, plan.action.sweep.axis)
    assert len(points) == 20
    skipped = [value for value, spec, _ in points if spec is None]
    assert skipped == [1.1, 1.2, 1.3, 1.4, 1.5], skipped
    print("Sweep grid passed!")


def test_verdict_table_is_total():
    print("Testing the verdict table...")
    tops = [
        TopExponent(lambda_top=1.0, stderr=0.01, n=10, replicas=10),
        TopExponent(lambda_top=-1.0, stderr=0.01, n=10, replicas=10),
        TopExponent(lambda_top=0.001, stderr=0.01, n=10, replicas=10),
    ]
    s0s = [
        S0Estimate(kind=S0Kind.AT_ZERO, lo=0.0, hi=0.0),
        S0Estimate(kind=S0Kind.BRACKET, lo=0.6, hi=0.62),
        S0Estimate(kind=S0Kind.BRACKET, lo=1.2, hi=1.22),
        S0Estimate(kind=S0Kind.BRACKET, lo=0.99, hi=1.01),
        S0Estimate(kind=S0Kind.LOWER_BOUND, lo=8.0, hi=float("inf")),
    ]
    seen = set()
    for top in tops:
        for s0 in s0s:
            verdict, moments, _ = decide_verdict(top, s0, 0.99)
            assert verdict in (Verdict.TRANSIENT, Verdict.RECURRENT, Verdict.UNDECIDED)
            assert moments
            seen.add(verdict)
    assert seen == {Verdict.TRANSIENT, Verdict.RECURRENT, Verdict.UNDECIDED}

    assert decide_verdict(tops[1], s0s[1], 0.99)[1].startswith("null recurrent")
    assert decide_verdict(tops[1], s0s[2], 0.99)[1].startswith("positive recurrent")
    assert decide_verdict(tops[1], s0s[4], 0.99)[1].startswith("positive recurrent")
    assert "undetermined" in decide_verdict(tops[1], s0s[3], 0.99)[1]
    print("Verdict table passed!")


def test_classify_pipeline():
    print("Testing classify on the reference systems...")
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "null"
        plan = load_plan(write_plan(tmp, SYSTEM + FAST_CLASSIFY + "seed: 11\n"), output_dir=str(out))
        result = run_plan(plan)
        assert result.verdict == Verdict.RECURRENT
        assert result.s0.lo <= oracles.NULL_S0 <= result.s0.hi
        assert result.moments.startswith("null recurrent"), result.moments
        assert result.scan.found

        verdict = json.loads((out / "verdict.json").read_text())
        assert list(verdict)[0] == "master_seed" and verdict["master_seed"] == 11
        assert verdict["verdict"] == "RECURRENT"
        assert "RECURRENT" in (out / "verdict.txt").read_text()
        rows = read_csv_body(out / "k_grid.csv")
        assert rows[0][:3] == ["s", "k_hat", "stderr"] and len(rows) == 10
        manifest = (out / "manifest.jsonl").read_text().splitlines()
        assert json.loads(manifest[-1])["action"] == "classify"

        transient = run_plan(load_plan(
            write_plan(tmp, DETERMINISTIC.format(mu0=1.25, mu1=1.5) + FAST_CLASSIFY, "transient.yaml"),
            output_dir=str(Path(tmp) / "transient"),
        ))
        assert transient.verdict == Verdict.TRANSIENT and transient.s0.kind == S0Kind.AT_ZERO

        bounded = run_plan(load_plan(
            write_plan(tmp, DETERMINISTIC.format(mu0=3.0, mu1=5.0) + FAST_CLASSIFY.replace("s_max: 4.0", "s_max: 8.0"), "bounded.yaml"),
            output_dir=str(Path(tmp) / "bounded"),
        ))
        assert bounded.verdict == Verdict.RECURRENT
        assert bounded.s0.kind == S0Kind.LOWER_BOUND and bounded.s0.lo == 8.0
        assert bounded.moments.startswith("positive recurrent")
        assert any("deterministic" in line for line in bounded.diagnostics)
    print("Classify passed!")


SWEEP = """
action:
  name: sweep
  axis:
    station: 0
    atom: 1
    field: mu
    values: {values}
  classify:
    n_top: 2000
    replicas_top: 30
    n: 24
    replicas: 2000
    tol: 0.05
"""


def test_sweep_finds_thick_null_region():
    print("Testing the slow-atom sweep...")
    values = [1.0, 1.1, 1.14, 1.17, 1.2, 1.23, 1.26, 1.3, 1.35, 1.4, 1.5]
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "sweep"
        plan = load_plan(write_plan(tmp, SYSTEM + SWEEP.format(values=values)), output_dir=str(out), threads=4)
        rows = run_plan(plan)
        body = read_csv_body(out / "sweep.csv")

    assert [r.theta for r in rows] == values
    assert body[0] == ["theta", "top_exponent", "s0_lo", "s0_hi", "verdict", "moments"]
    assert len(body) == len(values) + 1
    assert rows[0].verdict == Verdict.SKIPPED
    assert rows[1].verdict == Verdict.TRANSIENT

    labels = ["null" if r.moments.startswith("null recurrent") else "positive" if r.moments.startswith("positive recurrent") else "-" for r in rows]
    assert labels[2:7] == ["null"] * 5, labels
    assert labels[7:] == ["positive"] * 4, labels

    recurrent = [r for r in rows if r.verdict == Verdict.RECURRENT]
    lows = [r.s0_lo for r in recurrent]
    assert lows == sorted(lows), f"s0 should grow with mu: {lows}"
    assert recurrent[0].s0_hi < 1.0 < recurrent[-1].s0_lo
    print("Sweep passed!")


def test_sweep_rows_do_not_depend_on_grid_order():
    print("Testing sweep seeds keyed by value...")
    with tempfile.TemporaryDirectory() as tmp:
        forward = run_plan(load_plan(write_plan(tmp, SYSTEM + SWEEP.format(values=[1.2, 1.35])), output_dir=str(Path(tmp) / "a")))
        backward = run_plan(load_plan(write_plan(tmp, SYSTEM + SWEEP.format(values=[1.35, 1.2])), output_dir=str(Path(tmp) / "b")))
    assert forward == backward[::-1]

    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "empty"
        rows = run_plan(load_plan(write_plan(tmp, SYSTEM + SWEEP.format(values=[])), output_dir=str(out)))
        assert rows == []
        assert read_csv_body(out / "sweep.csv") == [["theta", "top_exponent", "s0_lo", "s0_hi", "verdict", "moments"]]
    print("Sweep ordering passed!")


SIMULATE = DETERMINISTIC.format(mu0=3.0, mu1=3.0) + """
action:
  name: simulate
  init: [4, 0]
  s_list: [1.0]
  replicas: 2000
seed: 99
"""


def test_simulate_is_reproducible():
    print("Testing simulate output reproducibility...")
    with tempfile.TemporaryDirectory() as tmp:
        first = Path(tmp) / "first"
        second = Path(tmp) / "second"
        run_plan(load_plan(write_plan(tmp, SIMULATE), output_dir=str(first)))
        run_plan(load_plan(write_plan(tmp, SIMULATE), output_dir=str(second), threads=4))
        for name in ("tau.csv", "tau_moments.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes(), f"{name} differs"
        assert (first / "tau.csv").read_text().startswith("# master_seed=99\n")
        assert (first / "tail.json").exists()
        rows = read_csv_body(first / "tau_moments.csv")
        assert abs(float(rows[1][1]) - 4.0) < 0.5
    print("Simulate passed!")


def test_couple_and_fluid_pipelines():
    print("Testing couple and fluid pipelines...")
    couple = DETERMINISTIC.format(mu0=3.0, mu1=3.0) + "action:\n  name: couple\n  y0: 2000\n  delta: 0.1\n  replicas: 200\n"
    fluid = DETERMINISTIC.format(mu0=1.25, mu1=1.5) + "action:\n  name: fluid\n  x: [4.0]\n"
    with tempfile.TemporaryDirectory() as tmp:
        report = run_plan(load_plan(write_plan(tmp, couple), output_dir=str(Path(tmp) / "couple")))
        assert report.freq_within >= 0.95
        assert json.loads((Path(tmp) / "couple" / "coupling.json").read_text())["replicas"] == 200

        result = run_plan(load_plan(write_plan(tmp, fluid, "fluid.yaml"), output_dir=str(Path(tmp) / "fluid")))
        assert result.diverged
        summary = json.loads((Path(tmp) / "fluid" / "fluid.json").read_text())
        assert summary["status"] == "DIVERGED" and summary["D"] is None
        assert (Path(tmp) / "fluid" / "fluid_trace.csv").exists()
    print("Couple and fluid passed!")


def test_cli_exit_codes():
    print("Testing command line exit codes...")
    runner = CliRunner()
    with tempfile.TemporaryDirectory() as tmp:
        bad = write_plan(tmp, SYSTEM.split("station 1:")[0] + "action:\n  name: classify\n", "bad.yaml")
        result = runner.invoke(cli, ["--plan", str(bad)])
        assert result.exit_code == 2, result.output

        good = write_plan(tmp, DETERMINISTIC.format(mu0=3.0, mu1=3.0) + "action:\n  name: fluid\n  x: [4.0]\n", "good.yaml")
        result = runner.invoke(cli, ["--plan", str(good), "--out", str(Path(tmp) / "out"), "--seed", "5"])
        assert result.exit_code == 0, result.output
        assert (Path(tmp) / "out" / "fluid.json").exists()
    print("Exit codes passed!")


if __name__ == "__main__":
    test_load_plan_fills_defaults()
    test_cli_overrides_win()
    test_missing_station_is_named()
    test_parse_errors_carry_location()
    test_sweep_grid_skips_unstable_points()
    test_verdict_table_is_total()
    test_classify_pipeline()
    test_sweep_finds_thick_null_region()
    test_sweep_rows_do_not_depend_on_grid_order()
    test_simulate_is_reproducible()
    test_couple_and_fluid_pipelines()
    test_cli_exit_codes()
