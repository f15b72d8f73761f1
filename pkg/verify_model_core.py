"""
Verification Script for the Model Core

Checks validation, the station matrices of all three disciplines, the
cycle product, the spectral radius and the transient-support scan against
hand-computed values.

Usage:
    python verify_model_core.py
"""

import os
import sys

import numpy as np

# Add the package to the path so the script runs from the repo root
sys.path.append(os.getcwd())

import oracles
from regen_polling.errors import (
    BadWeights,
    ConditionEViolation,
    DivisionByNonpositive,
    GammaOutOfRange,
    SpecValidationError,
    SupportTooLarge,
)
from regen_polling.models import Discipline, PollingSpec, Regime, RegimeLaw
from regen_polling.services.model_core import (
    atom_matrices,
    build_matrix_exhaustive,
    build_matrix_gated,
    build_matrix_revolver,
    compose_cycle,
    cycle_product,
    dump_matrix,
    sample_regime,
    scan_transient_support,
    spectral_radius,
    validate_spec,
)


def test_validate_constants():
    print("Testing validate_spec constants...")
    spec = oracles.stable()
    assert spec.eps0 == 2.0 and spec.M0 == 3.0, f"eps0/M0 wrong: {spec.eps0}, {spec.M0}"
    assert spec.z_max == 5.0
    assert spec.deterministic_regimes

    null = oracles.null_recurrent()
    assert null.eps0 == 0.25 and null.M0 == 3.0
    assert not null.deterministic_regimes

    d2 = oracles.random_d2()
    assert d2.eps0 == 1.0 and d2.M0 == 4.0
    print("Constants passed!")


def test_validate_collects_every_violation():
    print("Testing that validation reports every problem...")
    slow = RegimeLaw.single(Regime(mu=0.5, gamma=(0.0,)))
    bad_weights = RegimeLaw.of((Regime(mu=3.0, gamma=(0.0,)), 0.5), (Regime(mu=2.0, gamma=(0.0,)), 0.4))
    spec = PollingSpec(d=1, lam=(1.0, 1.0), nu=(slow, bad_weights))
    try:
        validate_spec(spec)
    except SpecValidationError as e:
        kinds = {type(v) for v in e.violations}
        stations = {v.station for v in e.violations}
        assert ConditionEViolation in kinds, f"missing Condition E violation: {e}"
        assert BadWeights in kinds, f"missing weight violation: {e}"
        assert stations == {0, 1}, f"violations should name both stations: {stations}"
    else:
        raise AssertionError("invalid spec passed validation")
    print("Violation collection passed!")


def test_gated_only_needs_positive_mu():
    print("Testing gated validation...")
    law = RegimeLaw.single(Regime(mu=0.5, gamma=(0.0, 0.0)))
    spec = validate_spec(PollingSpec(d=1, lam=(1.0, 1.0), nu=(law, law), discipline=Discipline.GATED))
    assert spec.eps0 == 0.5 and spec.dim == 2
    print("Gated validation passed!")


def test_exhaustive_matrix():
    print("Testing exhaustive station matrix...")
    spec = oracles.random_d2()
    m = build_matrix_exhaustive(spec, 0, Regime(mu=4.0, gamma=(0.25, 0.25)))
    expected = np.array([[2 / 3, 1.0], [2 / 3, 0.0]])
    assert np.allclose(m, expected, rtol=0, atol=1e-15), f"got {m}"

    try:
        build_matrix_exhaustive(spec, 0, Regime(mu=1.0, gamma=(0.0, 0.0)))
    except DivisionByNonpositive:
        pass
    else:
        raise AssertionError("mu = lambda should be rejected")
    print("Exhaustive matrix passed!")


def test_revolver_matrix():
    print("Testing revolver wheel matrix...")
    law = RegimeLaw.single(Regime(mu=5.0, gamma=(0.2, 0.0)))
    spec = PollingSpec(d=2, lam=(1.0, 2.0, 3.0), nu=(law,), discipline=Discipline.REVOLVER)
    m = build_matrix_revolver(spec, Regime(mu=5.0, gamma=(0.2, 0.0)))
    # (lambda_1 + gamma_1 mu) / (mu - lambda_0) = 3/4, lambda_2 / 4 = 3/4
    assert np.allclose(m, [[0.75, 1.0], [0.75, 0.0]], rtol=0, atol=1e-15), f"got {m}"
    print("Revolver matrix passed!")


def test_gated_matrix():
    print("Testing gated station matrix...")
    law = RegimeLaw.single(Regime(mu=2.0, gamma=(0.25, 0.25)))
    spec = PollingSpec(d=1, lam=(1.0, 1.0), nu=(law, law), discipline=Discipline.GATED)
    m = build_matrix_gated(spec, 0, Regime(mu=2.0, gamma=(0.25, 0.25)))
    # ahead: (1 + 0.5) / 2; left behind the gate: (1 + 0.5) / 2
    assert np.allclose(m, [[0.75, 1.0], [0.75, 0.0]], rtol=0, atol=1e-15), f"got {m}"
    print("Gated matrix passed!")


def test_compose_cycle_scalar_values():
    print("Testing cycle values of the d=1 reference systems...")
    null = oracles.null_recurrent()
    fast, slow = null.law(0).regimes
    station1 = null.law(1).regimes[0]
    assert compose_cycle(null, [fast, station1])[0, 0] == 0.25
    assert compose_cycle(null, [slow, station1])[0, 0] == 2.0
    assert abs(compose_cycle(oracles.transient(), [oracles.transient().law(n).regimes[0] for n in (0, 1)])[0, 0] - 8.0) < 1e-12
    assert abs(compose_cycle(oracles.all_moments(), [oracles.all_moments().law(n).regimes[0] for n in (0, 1)])[0, 0] - 0.125) < 1e-15
    print("Cycle values passed!")


def test_atom_matrices_read_only():
    print("Testing atom matrix cache...")
    stack = atom_matrices(oracles.random_d2(), 1)
    assert stack.shape == (2, 2, 2)
    assert not stack.flags.writeable, "cached matrices must not be writable"
    print("Atom matrices passed!")


def test_spectral_radius():
    print("Testing spectral radius...")
    # Periodic matrix: plain power iteration oscillates, the shifted restart converges
    periodic = np.array([[0.0, 2.0], [0.5, 0.0]])
    assert abs(spectral_radius(periodic) - 1.0) < 1e-9, spectral_radius(periodic)

    rand = np.random.default_rng(11)
    for _ in range(50):
        m = rand.random((4, 4))
        expected = float(np.max(np.abs(np.linalg.eigvals(m))))
        assert abs(spectral_radius(m) - expected) < 1e-9 * expected

    assert spectral_radius(np.zeros((3, 3))) == 0.0
    assert spectral_radius([[0.0, 1.0], [0.0, 0.0]]) == 0.0
    print("Spectral radius passed!")


def test_spectral_radius_scales_linearly():
    print("Testing spectral radius under scaling...")
    rand = np.random.default_rng(19)
    for _ in range(30):
        m = rand.random((3, 3))
        rho = spectral_radius(m)
        for c in (0.1, 2.0, 7.5):
            assert abs(spectral_radius(c * m) - c * rho) <= 1e-9 * c * rho, f"c={c}: {spectral_radius(c * m)} vs {c * rho}"

    periodic = np.array([[0.0, 2.0], [0.5, 0.0]])
    assert abs(spectral_radius(3.0 * periodic) - 3.0) < 1e-9
    print("Scaling passed!")


def test_compose_cycle_leaves_inputs_alone():
    print("Testing compose_cycle purity and B^3...")
    regime = Regime(mu=5.0, gamma=(0.2, 0.0))
    spec = validate_spec(PollingSpec(d=2, lam=(1.0, 2.0, 3.0), nu=(RegimeLaw.single(regime),), discipline=Discipline.REVOLVER))
    regimes = [regime, regime, regime]
    before = [r.model_copy() for r in regimes]

    first = compose_cycle(spec, regimes)
    first[0, 0] = -1.0
    second = compose_cycle(spec, regimes)
    assert regimes == before and all(r is regime for r in regimes)
    assert second[0, 0] != -1.0, "each call must return a fresh matrix"

    # The revolver wheel matrix is the same at every station, so the cycle is B^3
    b = build_matrix_revolver(spec, regime)
    assert np.allclose(second, b @ b @ b, rtol=1e-12, atol=0.0), second
    assert np.allclose(cycle_product([b, b, b]), np.linalg.matrix_power(b, 3), rtol=1e-12, atol=0.0)
    print("compose_cycle purity passed!")


def test_condition_e_boundary():
    print("Testing the Condition E boundary...")

    def spec_with(mu: float, gamma: tuple[float, ...]) -> PollingSpec:
        law = RegimeLaw.single(Regime(mu=mu, gamma=gamma))
        return PollingSpec(d=2, lam=(1.0, 1.0, 1.0), nu=(law, law, law))

    inside = validate_spec(spec_with(1.0 + 1e-9, (0.5, 0.5)))
    assert 0.0 < inside.eps0 < 1e-8, inside.eps0

    for mu, gamma, kind in ((1.0, (0.0, 0.0), ConditionEViolation), (0.999, (0.0, 0.0), ConditionEViolation),
                            (2.0, (0.5, 0.500001), GammaOutOfRange), (2.0, (-0.1, 0.5), GammaOutOfRange)):
        try:
            validate_spec(spec_with(mu, gamma))
        except SpecValidationError as e:
            assert {type(v) for v in e.violations} == {kind}, f"mu={mu}, gamma={gamma}: {e}"
        else:
            raise AssertionError(f"mu={mu}, gamma={gamma} should be rejected")

    # Random atoms on either side of mu = lambda_n and sum(gamma) = 1
    rand = np.random.default_rng(404)
    fast = RegimeLaw.single(Regime(mu=10.0, gamma=(0.0, 0.0)))
    for _ in range(200):
        lam = tuple(rand.uniform(0.5, 2.0, 3).tolist())
        mu_ok = bool(rand.random() < 0.5)
        gamma_ok = bool(rand.random() < 0.5)
        mu = lam[1] * (1.0 + 1e-6 if mu_ok else 1.0 - 1e-6)
        total = 1.0 - 1e-6 if gamma_ok else 1.0 + 1e-6
        split = float(rand.uniform(0.1, 0.9))
        edge = RegimeLaw.single(Regime(mu=mu, gamma=(split * total, (1.0 - split) * total)))
        try:
            validate_spec(PollingSpec(d=2, lam=lam, nu=(fast, edge, fast)))
            accepted = True
        except SpecValidationError:
            accepted = False
        assert accepted == (mu_ok and gamma_ok), f"lam={lam}, mu={mu}, sum(gamma)={total}: accepted={accepted}"
    print("Condition E boundary passed!")


def test_support_scan():
    print("Testing transient-support scan...")
    found = scan_transient_support(oracles.null_recurrent())
    assert found.found and found.rho == 2.0, f"slow atom should be a witness: {found}"
    assert found.witness[0].mu == 1.25

    clean = scan_transient_support(oracles.stable())
    assert not clean.found and abs(clean.rho - 0.25) < 1e-15
    assert clean.total == 1 and not clean.partial

    partial = scan_transient_support(oracles.random_d2(), cap=3, rand=np.random.default_rng(0))
    assert partial.partial and partial.checked <= 3 and partial.total == 8
    try:
        scan_transient_support(oracles.random_d2(), cap=3, strict=True)
    except SupportTooLarge:
        pass
    else:
        raise AssertionError("strict scan over the cap should raise")
    print("Support scan passed!")


def test_sample_regime():
    print("Testing regime sampling...")
    law = oracles.null_recurrent().law(0)
    first = [sample_regime(law, np.random.default_rng(5)).mu for _ in range(3)]
    assert len(set(first)) == 1, "same seed must give the same regime"

    rand = np.random.default_rng(6)
    draws = [sample_regime(law, rand).mu for _ in range(20_000)]
    fraction = draws.count(1.25) / len(draws)
    assert abs(fraction - 0.5) < 0.02, f"slow atom frequency {fraction}"
    print("Regime sampling passed!")


def test_dump_matrix():
    print("Testing matrix dump...")
    text = dump_matrix([[0.5, 1.0], [0.25, 0.0]])
    assert text.splitlines() == ["0.5 1", "0.25 0"], text
    print("Matrix dump passed!")


if __name__ == "__main__":
    test_validate_constants()
    test_validate_collects_every_violation()
    test_gated_only_needs_positive_mu()
    test_exhaustive_matrix()
    test_revolver_matrix()
    test_gated_matrix()
    test_compose_cycle_scalar_values()
    test_atom_matrices_read_only()
    test_spectral_radius()
    test_spectral_radius_scales_linearly()
    test_compose_cycle_leaves_inputs_alone()
    test_condition_e_boundary()
    test_support_scan()
    test_dump_matrix()
    test_sample_regime()
