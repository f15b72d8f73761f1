"""
Verification Script for the Lyapunov Estimates

Checks k(s), the top exponent and s0 on systems whose cycle values are
scalars (closed forms), plus the series and log-convexity diagnostics.

Usage:
    python verify_lyapunov.py
"""

import math
import os
import sys

import numpy as np

# Add the package to the path so the script runs from the repo root
sys.path.append(os.getcwd())

import oracles
from regen_polling.errors import DegenerateNorm
from regen_polling.models import ClassifyParams, KEstimate, LyapunovReport, S0Kind, SeriesVerdict
from regen_polling.services.lyapunov import (
    CycleSampler,
    build_report,
    check_log_convexity,
    estimate_k,
    estimate_s0,
    estimate_top_exponent,
    renormalized_log_norm,
    series_tail_diagnostic,
)

BUDGET = 2_000_000_000


def test_k_matches_scalar_closed_form():
    print("Testing k(s) against (4^-s + 2^s) / 2...")
    spec = oracles.null_recurrent()
    for s in (0.25, 0.5, 1.0):
        est = estimate_k(spec, s, 32, 10_000, np.random.default_rng(1))
        exact = (4.0 ** -s + 2.0 ** s) / 2.0
        assert abs(est.k_hat - exact) <= max(3 * est.stderr, 1e-9), f"s={s}: {est.k_hat} vs {exact}"
        assert abs(est.k_hat / exact - 1.0) < 0.02
    print("k(s) passed!")


def test_k_at_zero_is_one():
    print("Testing k(0) = 1...")
    est = estimate_k(oracles.random_d2(), 0.0, 8, 100, np.random.default_rng(0))
    assert est.k_hat == 1.0 and est.stderr == 0.0
    print("k(0) passed!")


def test_untilted_sampling_on_deterministic_system():
    print("Testing plain sampling on a deterministic system...")
    est = estimate_k(oracles.all_moments(), 2.0, 16, 100, np.random.default_rng(0), tilt=False)
    assert abs(est.k_hat - 0.125 ** 2) < 1e-12, est
    print("Plain sampling passed!")


def test_tilt_weights_average_to_one():
    print("Testing the importance weights...")
    sampler = CycleSampler(oracles.null_recurrent(), tilt=1.0)
    _, log_weight = sampler.sample(np.random.default_rng(4), 100_000)
    mean = float(np.exp(log_weight).mean())
    assert abs(mean - 1.0) < 0.02, f"mean likelihood ratio {mean}"
    print("Importance weights passed!")


def test_top_exponent():
    print("Testing the top exponent...")
    est = estimate_top_exponent(oracles.null_recurrent(), 1000, 30, np.random.default_rng(7))
    assert abs(est.lambda_top - oracles.NULL_TOP_EXPONENT) < 0.02, est

    det = estimate_top_exponent(oracles.transient(), 1000, 30, np.random.default_rng(7))
    assert abs(det.lambda_top - math.log(8.0)) < 1e-9, det
    print("Top exponent passed!")


def test_s0_bracket():
    print("Testing s0 recovery...")
    est = estimate_s0(oracles.null_recurrent(), 8.0, 0.02, 0.99, BUDGET, np.random.default_rng(3))
    assert est.kind == S0Kind.BRACKET and est.confident
    assert est.lo <= oracles.NULL_S0 <= est.hi and est.hi - est.lo <= 0.02, est
    print(f"s0 in [{est.lo:.4f}, {est.hi:.4f}], passed!")


def test_s0_special_cases():
    print("Testing s0 at zero and beyond the grid...")
    transient = estimate_s0(oracles.transient(), 8.0, 0.02, 0.99, BUDGET, np.random.default_rng(3))
    assert transient.kind == S0Kind.AT_ZERO and transient.lo == 0.0

    bounded = estimate_s0(oracles.all_moments(), 8.0, 0.02, 0.99, BUDGET, np.random.default_rng(3))
    assert bounded.kind == S0Kind.LOWER_BOUND and bounded.lo == 8.0 and math.isinf(bounded.hi)

    top = estimate_top_exponent(oracles.null_recurrent(), 100, 30, np.random.default_rng(3))
    starved = estimate_s0(oracles.null_recurrent(), 8.0, 0.02, 0.99, 1000, np.random.default_rng(3), top=top)
    assert starved.budget_exhausted and not starved.confident
    assert starved.lo == 0.0 and starved.hi == 8.0
    print("Special cases passed!")


def test_renormalisation():
    print("Testing renormalised products...")
    value = renormalized_log_norm([np.diag([2.0, 1.0])] * 2000)
    assert abs(value - 2000 * math.log(2.0)) < 1e-9, value

    try:
        renormalized_log_norm([np.array([[0.0, 1.0], [0.0, 0.0]])] * 2)
    except DegenerateNorm:
        pass
    else:
        raise AssertionError("a nilpotent product should be degenerate")
    print("Renormalisation passed!")


def test_log_convexity_on_reference_systems():
    print("Testing log-convexity of k on the reference systems...")
    params = ClassifyParams(n=16, replicas=2000, n_top=200, replicas_top=10)
    grid = tuple(0.25 * i for i in range(9))
    for name in ("null_recurrent", "transient", "all_moments", "stable"):
        report = build_report(getattr(oracles, name)(), params, seed=1, grid=grid)
        check = check_log_convexity(report)
        assert check.ok, f"{name}: violation {check.worst_violation} at s={check.worst_at}"
        assert len(report.estimates_2n) == len(grid) and not any(report.length_bias)
    print("Log-convexity passed!")


def _report_from_log_k(values, log_stderr=0.01):
    estimates = tuple(
        KEstimate(
            s=s, k_hat=math.exp(v), stderr=math.exp(v) * log_stderr,
            log_k=v, log_stderr=log_stderr, n=32, replicas=1000,
        )
        for s, v in values
    )
    return LyapunovReport(s_grid=tuple(s for s, _ in values), estimates=estimates, n=32, replicas=1000)


def test_log_convexity_flags_a_raised_midpoint():
    print("Testing that a non-convex bump in log k is caught...")
    grid = (0.0, 0.25, 0.5, 0.75, 1.0)
    convex = [(s, 0.2 * s * s) for s in grid]
    assert check_log_convexity(_report_from_log_k(convex)).ok

    # Lift log k at s = 0.5 by 10 standard errors above the convex curve
    bumped = [(s, v + (10 * 0.01 if s == 0.5 else 0.0)) for s, v in convex]
    check = check_log_convexity(_report_from_log_k(bumped))
    assert not check.ok, check
    assert check.worst_at == 0.5, check
    assert check.worst_violation > 0.0

    # A lift inside the noise allowance is tolerated
    small = [(s, v + (0.01 if s == 0.5 else 0.0)) for s, v in convex]
    assert check_log_convexity(_report_from_log_k(small)).ok
    print("Convexity violation passed!")


def test_series_diagnostic():
    print("Testing the series tail diagnostic...")
    bounded = series_tail_diagnostic(oracles.theta(0.5), 1.0, 40, 2000, np.random.default_rng(1))
    assert bounded.verdict == SeriesVerdict.BOUNDED, bounded.slope

    growing = series_tail_diagnostic(oracles.theta(2.0), 1.0, 40, 2000, np.random.default_rng(1))
    assert growing.verdict == SeriesVerdict.DIVERGING, growing.slope

    null = series_tail_diagnostic(oracles.null_recurrent(), 1.0, 40, 10_000, np.random.default_rng(1))
    assert null.verdict == SeriesVerdict.DIVERGING, (null.slope, null.band)
    print("Series diagnostic passed!")


if __name__ == "__main__":
    test_k_matches_scalar_closed_form()
    test_k_at_zero_is_one()
    test_untilted_sampling_on_deterministic_system()
    test_tilt_weights_average_to_one()
    test_top_exponent()
    test_s0_bracket()
    test_s0_special_cases()
    test_renormalisation()
    test_log_convexity_on_reference_systems()
    test_log_convexity_flags_a_raised_midpoint()
    test_series_diagnostic()
