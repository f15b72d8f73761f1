"""
Verification Script for the Fluid Model

Checks single switch epochs (explicit update against the matrix form),
the fluid emptying time, the ratio and norm bounds, the coupling with the
stochastic model and the exact one-step drift.

Usage:
    python verify_fluid.py
"""

import os
import sys
import tempfile
from pathlib import Path

import numpy as np

# Add the package to the path so the script runs from the repo root
sys.path.append(os.getcwd())

import oracles
from regen_polling.errors import UnsupportedDiscipline
from regen_polling.models import Configuration, Discipline, FluidState, PollingSpec, Regime, RegimeLaw
from regen_polling.services.fluid import (
    _advance,
    check_ratio_bound,
    coupling_experiment,
    drain_time,
    drain_time_bounds,
    drift_check,
    fluid_empty_time,
    fluid_state_from_queues,
    fluid_step,
    fluid_step_via_matrix,
    norm_sandwich_constants,
    ratio_bound_K,
    series_sandwich,
    write_fluid_trace,
)
from regen_polling.services.model_core import compose_cycle, validate_spec
from regen_polling.services.stochastic import RegimeStream
from regen_polling.utils.output import read_csv_body


def test_single_epoch_examples():
    print("Testing single fluid epochs...")
    stable = oracles.stable()
    regime = stable.law(0).regimes[0]
    assert drain_time(FluidState(x=(4.0,)), regime, stable) == 2.0

    d2 = oracles.random_d2()
    nxt, T = fluid_step(FluidState(epoch=0, x=(3.0, 1.0)), Regime(mu=4.0, gamma=(0.25, 0.25)), d2)
    assert T == 1.0 and nxt.x == (3.0, 2.0) and nxt.epoch == 1 and nxt.elapsed == 1.0, nxt

    lo, hi = drain_time_bounds(FluidState(x=(4.0, 1.0)), d2)
    assert lo == 1.0 and hi == 4.0
    print("Single epochs passed!")


def _random_triple(rand: np.random.Generator):
    d = int(rand.integers(1, 7))
    discipline = [Discipline.EXHAUSTIVE, Discipline.REVOLVER, Discipline.GATED][int(rand.integers(3))]
    lam = tuple(rand.uniform(0.5, 2.0, d + 1).tolist())
    size = d + 1 if discipline == Discipline.GATED else d
    gamma = rand.dirichlet(np.ones(size + 1))[:size] * rand.uniform(0.0, 1.0)
    regime = Regime(mu=max(lam) + rand.uniform(0.1, 3.0), gamma=tuple(gamma.tolist()))
    law = RegimeLaw.single(regime)
    nu = (law,) if discipline == Discipline.REVOLVER else (law,) * (d + 1)
    spec = validate_spec(PollingSpec(d=d, lam=lam, nu=nu, discipline=discipline))
    carry = 0.0 if discipline == Discipline.GATED else float(rand.uniform(0.0, 5.0))
    state = FluidState(epoch=int(rand.integers(0, 50)), x=tuple(rand.uniform(0.1, 5.0, size).tolist()), carry=carry)
    return spec, state, regime


def test_explicit_update_matches_matrix():
    print("Testing explicit fluid update against the matrix form (1000 triples)...")
    rand = np.random.default_rng(2009)
    for _ in range(1000):
        spec, state, regime = _random_triple(rand)
        a, ta = fluid_step(state, regime, spec)
        b, tb = fluid_step_via_matrix(state, regime, spec)
        assert ta == tb
        assert np.allclose(a.x, b.x, rtol=1e-12, atol=0.0), f"{spec.discipline} d={spec.d}: {a.x} vs {b.x}"
    print("Matrix equivalence passed!")


def test_fluid_empty_time_geometric():
    print("Testing fluid emptying time on the stable system...")
    spec = oracles.stable()
    result = fluid_empty_time(spec, FluidState(x=(4.0,)), RegimeStream(spec, 0))
    assert not result.diverged and abs(result.D - 4.0) < 1e-6, result.D
    for n, value in enumerate(result.partial_sums[:30], start=1):
        assert value == 4.0 * (1.0 - 2.0 ** -n), f"partial sum {n}: {value}"

    empty = fluid_empty_time(spec, FluidState(x=(0.0,)), RegimeStream(spec, 0))
    assert empty.D == 0.0 and empty.epochs == 0
    print("Emptying time passed!")


def test_fluid_time_is_linear_in_the_start():
    print("Testing D(c x) = c D(x) on a fixed stream...")
    spec = oracles.stable_d2()
    for seed in range(5):
        stream = RegimeStream(spec, seed)
        x = (1.0, 2.5)
        base = fluid_empty_time(spec, FluidState(x=x), stream)
        assert not base.diverged
        for c in (0.5, 2.0, 8.0, 1024.0):
            scaled = fluid_empty_time(spec, FluidState(x=tuple(c * v for v in x)), stream)
            assert abs(scaled.D - c * base.D) <= 1e-12 * c * base.D, f"seed {seed}, c={c}: {scaled.D} vs {c * base.D}"
            assert scaled.epochs == base.epochs
    print("Linearity passed!")


def test_fluid_time_against_full_series():
    print("Testing D_infinity against the full matrix series on the d=2 system (10 streams)...")
    spec = oracles.stable_d2()
    _, c2 = norm_sandwich_constants(spec)
    x = np.array([1.0, 3.0])
    for seed in range(10):
        stream = RegimeStream(spec, seed)
        result = fluid_empty_time(spec, FluidState(x=tuple(x.tolist())), stream)
        assert not result.diverged

        product = np.eye(spec.dim)
        series = np.zeros((spec.dim, spec.dim))
        first_norm = None
        for m in range(200):
            block = compose_cycle(spec, stream.take(m * spec.stations, spec.stations))
            first_norm = float(block.sum()) if first_norm is None else first_norm
            product = block @ product
            series += product

        ratio = result.D / float(series.sum())
        u1 = x.min() / spec.M0
        u2 = (1.0 + c2 + c2 ** 2) * x.sum() * (1.0 + 1.0 / first_norm) / spec.eps0
        assert u1 * (1 - 1e-6) <= ratio <= u2 * (1 + 1e-6), f"seed {seed}: D / ||L|| = {ratio} outside [{u1}, {u2}]"
    print("Full series passed!")


def test_transient_fluid_diverges():
    print("Testing divergence on the transient system...")
    spec = oracles.transient()
    result = fluid_empty_time(spec, FluidState(x=(4.0,)), RegimeStream(spec, 0))
    assert result.diverged and result.D is None
    print("Divergence passed!")


def test_fluid_trace_file():
    print("Testing the fluid trace file...")
    spec = oracles.stable()
    trace = []
    fluid_empty_time(spec, FluidState(x=(4.0,)), RegimeStream(spec, 0), trace=trace)
    with tempfile.TemporaryDirectory() as tmp:
        path = write_fluid_trace(Path(tmp) / "trace.csv", spec, trace, seed=5)
        assert path.read_text().startswith("# master_seed=5\n")
        rows = read_csv_body(path)
    assert rows[0] == ["epoch", "station", "time", "x0", "drain"]
    assert rows[1] == ["0", "0", "0.0", "4.0", "2.0"]
    assert len(rows) == len(trace) + 1
    print("Trace file passed!")


def test_state_from_queues():
    print("Testing fluid start from a configuration...")
    spec = oracles.stable()
    state = fluid_state_from_queues(spec, Configuration(server=1, queues=(3, 5)))
    assert state.epoch == 1 and state.x == (5.0,) and state.carry == 3.0
    print("Fluid start passed!")


def test_ratio_bound():
    print("Testing the component-ratio bound (100 streams x 1000 epochs)...")
    assert ratio_bound_K(oracles.null_recurrent()) == 1458.0
    spec = oracles.random_d2()
    K = ratio_bound_K(spec)
    assert K == 1296.0, K
    worst = 0.0
    for seed in range(100):
        check = check_ratio_bound(spec, FluidState(x=(1.0, 1.0)), RegimeStream(spec, seed), 1000)
        assert check.ok, f"stream {seed}: ratio {check.max_ratio} > K"
        worst = max(worst, check.max_ratio)

    # Gated fluid states carry d+1 levels, so K is taken over d+1 of them
    gated = _gated()
    assert gated.dim == 2 and gated.eps0 == 2.0 and gated.M0 == 2.0
    assert ratio_bound_K(gated) == (1.0 + 2.0 / 2.0) ** 3 * 3 * 4.0, ratio_bound_K(gated)
    print(f"Largest ratio {worst:.3f} <= K = {K}, passed!")


def test_norm_sandwich_per_epoch():
    print("Testing the per-epoch norm bounds...")
    spec = oracles.random_d2()
    c1, c2 = norm_sandwich_constants(spec)
    stream = RegimeStream(spec, 3)
    x = np.array([2.0, 1.0])
    for i in range(200):
        nxt, _ = _advance(spec, i % spec.stations, x, 0.0, stream[i])
        ratio = nxt.sum() / x.sum()
        assert c1 - 1e-12 <= ratio <= c2 + 1e-12, f"epoch {i}: {ratio} outside [{c1}, {c2}]"
        x = nxt / nxt.sum()
    print("Norm bounds passed!")


def test_series_sandwich():
    print("Testing fluid time against the matrix series...")
    for spec in (oracles.stable_d2(), oracles.null_recurrent(), oracles.random_d2()):
        for seed in range(5):
            x = (1.0,) * spec.dim
            result = series_sandwich(spec, FluidState(x=x), RegimeStream(spec, seed), cycles=30)
            assert result.ok, f"ratios outside [{result.U1}, {result.U2}]: {min(result.ratios)}, {max(result.ratios)}"
    print("Series sandwich passed!")


def test_exact_drift():
    print("Testing the exact one-step drift...")
    spec = oracles.stable()
    regime = spec.law(0).regimes[0]
    stream = RegimeStream(spec, 0)
    check = drift_check(spec, Configuration(server=0, queues=(4, 0)), regime, stream)
    assert abs(check.drift - (-0.2)) <= 1e-6, check
    assert check.target == -0.2 and check.outcomes == 3

    d2 = oracles.stable_d2()
    stream = RegimeStream(d2, 21)
    cfg = Configuration(server=1, queues=(2, 3, 1))
    exact = drift_check(d2, cfg, stream[1], stream)
    assert abs(exact.drift - exact.target) <= exact.error_bound + 1e-9, exact

    sampled = drift_check(d2, cfg, stream[1], stream, replicas=20_000, rand=np.random.default_rng(1))
    assert abs(sampled.drift - sampled.target) < 0.05, sampled

    # Every atom of the serving station, and the same system run c times faster
    for r in d2.law(1).regimes:
        per_atom = drift_check(d2, cfg, r, stream)
        assert per_atom.eps_hat == 1.0 / (1.5 + d2.M0)
        assert per_atom.target <= -per_atom.eps_hat, per_atom
        assert per_atom.drift <= -per_atom.eps_hat + per_atom.error_bound + 1e-9, f"mu={r.mu}: {per_atom}"

    for c in (2.0, 3.0):
        fast = validate_spec(oracles.scalar_spec([(1.0, 3.0 * c)], 3.0 * c, lam=(c, c)))
        scaled = drift_check(fast, Configuration(server=0, queues=(4, 0)), fast.law(0).regimes[0], RegimeStream(fast, 0))
        assert abs(scaled.target - (-0.2 / c)) < 1e-15
        assert abs(scaled.drift - (-0.2 / c)) <= 1e-6, f"c={c}: {scaled}"

    try:
        gated = _gated()
        drift_check(gated, Configuration(server=0, queues=(1, 0), gate=1), gated.law(0).regimes[0], None)
    except UnsupportedDiscipline:
        pass
    else:
        raise AssertionError("gated drift should be unsupported")
    print("Drift passed!")


def _gated():
    law = RegimeLaw.single(Regime(mu=2.0, gamma=(0.0, 0.0)))
    return validate_spec(PollingSpec(d=1, lam=(1.0, 1.0), nu=(law, law), discipline=Discipline.GATED))


def test_coupling():
    print("Testing the fluid/stochastic coupling (y0 = 2000, 1000 replicas)...")
    spec = oracles.stable()
    tight = coupling_experiment(spec, 2000.0, 0.05, 1000, seed=17, threads=4)
    assert tight.freq_within >= 0.99, tight
    assert tight.freq_vector_within >= 0.95, tight

    loose = coupling_experiment(spec, 2000.0, 0.1, 1000, seed=17, threads=4)
    assert loose.freq_within >= 0.99 and loose.freq_vector_within >= 0.99, loose
    print("Coupling passed!")


if __name__ == "__main__":
    test_single_epoch_examples()
    test_explicit_update_matches_matrix()
    test_fluid_empty_time_geometric()
    test_fluid_time_is_linear_in_the_start()
    test_fluid_time_against_full_series()
    test_transient_fluid_diverges()
    test_fluid_trace_file()
    test_state_from_queues()
    test_ratio_bound()
    test_norm_sandwich_per_epoch()
    test_series_sandwich()
    test_exact_drift()
    test_coupling()
