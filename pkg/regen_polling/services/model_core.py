"""
Model Core - System Validation and Random Matrices

This module holds everything the other services are driven from:
1. validate_spec: Condition E and the derived constants eps0, M0, ...
2. sample_regime: inverse-CDF draw of a regime from a finite-support law
3. build_matrix_*: the per-station matrices for the exhaustive, revolver
   and gated disciplines, and compose_cycle for the cycle matrix A
4. spectral_radius and scan_transient_support: the support test that
   proves s0 < infinity when some fixed choice of regimes is transient

Matrix orientation: the fractions sit in the first column, ones on the
superdiagonal, and the matrices act on column vectors of fluid levels
(x_next = M @ x). All matrix norms are entrywise L1 norms.
"""

import itertools
import logging
import math
from functools import lru_cache

import numpy as np

from regen_polling.config import settings
from regen_polling.errors import (
    BadWeights,
    ConditionEViolation,
    DivisionByNonpositive,
    EmptyLaw,
    GammaOutOfRange,
    NoConvergence,
    SpecValidationError,
    SpecViolation,
    SupportTooLarge,
)
from regen_polling.models import (
    Discipline,
    PollingSpec,
    Regime,
    RegimeLaw,
    SupportScan,
    ValidatedSpec,
)
from regen_polling.utils.seeding import derive_rng
from regen_polling.utils.text import format_matrix
from regen_polling.utils.validators import (
    is_finite_nonnegative,
    is_probability_vector,
    is_substochastic,
)

logger = logging.getLogger(__name__)


def _base(spec: PollingSpec | ValidatedSpec) -> PollingSpec:
    return spec.spec if isinstance(spec, ValidatedSpec) else spec


# --- Validation ------------------------------------------------------------

def _checked_laws(spec: PollingSpec) -> list[tuple[int, RegimeLaw]]:
    if spec.discipline == Discipline.REVOLVER:
        return [(0, spec.nu[0])]
    return list(enumerate(spec.nu))


def collect_violations(spec: PollingSpec) -> list[SpecViolation]:
    """
    Check every station and atom and return all problems found.

    Condition E as enforced here:
    - exhaustive: every atom of nu_n has mu > lambda_n
    - revolver: every atom of the wheel's law has mu > lambda_0
    - gated: every atom has 0 < mu (eps0 = min mu, M0 = max mu)
    """
    violations: list[SpecViolation] = []

    for n, rate in enumerate(spec.lam):
        if not (math.isfinite(rate) and rate > 0.0):
            violations.append(SpecViolation(f"arrival rate must be finite and > 0, got {rate}", station=n))

    for n, law in _checked_laws(spec):
        if not law.atoms:
            violations.append(EmptyLaw("regime law has no atoms", station=n))
            continue

        if not is_probability_vector(law.weights, tol=settings.WEIGHT_TOLERANCE):
            violations.append(BadWeights(
                f"weights must be > 0 and sum to 1, got {list(law.weights)}", station=n
            ))

        for j, regime in enumerate(law.regimes):
            if len(regime.gamma) != spec.gamma_length:
                violations.append(GammaOutOfRange(
                    f"gamma needs {spec.gamma_length} entries, got {len(regime.gamma)}", station=n, atom=j
                ))
            elif not is_substochastic(regime.gamma, tol=settings.WEIGHT_TOLERANCE):
                violations.append(GammaOutOfRange(
                    f"gamma entries must be >= 0 with sum <= 1, got {list(regime.gamma)}", station=n, atom=j
                ))

            mu = regime.mu
            if not (math.isfinite(mu) and mu > 0.0):
                violations.append(ConditionEViolation(f"mu must be finite and > 0, got {mu}", station=n, atom=j))
                continue
            if spec.discipline != Discipline.GATED:
                ref = spec.lam[0] if spec.discipline == Discipline.REVOLVER else spec.lam[n]
                if mu <= ref:
                    violations.append(ConditionEViolation(
                        f"mu={mu} must exceed the arrival rate {ref}", station=n, atom=j
                    ))

    return violations


def validate_spec(spec: PollingSpec) -> ValidatedSpec:
    """
    Validate a spec and annotate it with its Condition E constants.

    Returns:
        ValidatedSpec with eps0, M0, lam_max, lam_min, z_max = M0 + sum(lambda)
        and the deterministic_regimes flag

    Raises:
        SpecValidationError: carrying every violation found

    Example:
        d=1, lambda=(1,1), both stations a single atom (mu=3, gamma=(0,))
        gives eps0=2, M0=3.
    """
    violations = collect_violations(spec)
    if violations:
        raise SpecValidationError(violations)

    laws = _checked_laws(spec)
    mus = [(n, r.mu) for n, law in laws for r in law.regimes]
    if spec.discipline == Discipline.GATED:
        eps0 = min(mu for _, mu in mus)
    elif spec.discipline == Discipline.REVOLVER:
        eps0 = min(mu - spec.lam[0] for _, mu in mus)
    else:
        eps0 = min(mu - spec.lam[n] for n, mu in mus)
    M0 = max(mu for _, mu in mus)

    if spec.discipline == Discipline.REVOLVER and any(law != spec.nu[0] for law in spec.nu[1:]):
        logger.warning("Revolver spec lists several laws; only the wheel's law nu[0] is used")

    deterministic = all(law.is_degenerate for _, law in laws)
    if deterministic:
        logger.warning("Every regime law is a single atom: the cycle matrix is not random")

    return ValidatedSpec(
        spec=spec,
        eps0=eps0,
        M0=M0,
        lam_max=max(spec.lam),
        lam_min=min(spec.lam),
        z_max=M0 + math.fsum(spec.lam),
        deterministic_regimes=deterministic,
    )


# --- Regime sampling -------------------------------------------------------

def sample_atom_index(law: RegimeLaw, rand: np.random.Generator) -> int:
    """Inverse-CDF draw over the atoms in declaration order (one uniform per call)."""
    cumulative = np.cumsum(law.weights)
    u = rand.random() * cumulative[-1]
    index = int(np.searchsorted(cumulative, u, side="right"))
    return min(index, len(law.atoms) - 1)


def sample_regime(law: RegimeLaw, rand: np.random.Generator) -> Regime:
    """
    Draw one regime from a finite-support law.

    Deterministic given the generator state: the same seed reproduces the
    same sequence of regimes.
    """
    return law.atoms[sample_atom_index(law, rand)].regime


# --- Matrices --------------------------------------------------------------

def _first_column_matrix(column: np.ndarray) -> np.ndarray:
    size = column.shape[0]
    matrix = np.zeros((size, size))
    matrix[:, 0] = column
    if size > 1:
        matrix[np.arange(size - 1), np.arange(1, size)] = 1.0
    return matrix


def build_matrix_exhaustive(spec: PollingSpec | ValidatedSpec, n: int, r: Regime) -> np.ndarray:
    """
    Station matrix A^(n) for the exhaustive discipline (d x d).

    Row k of the first column is (lambda_[n+k+1] + gamma_{k+1} mu) / (mu - lambda_n).

    Example:
        d=2, lambda=(1,1,1), n=0, mu=4, gamma=(0.25, 0.25)
        -> [[2/3, 1], [2/3, 0]]
    """
    base = _base(spec)
    d = base.d
    if len(r.gamma) != d:
        raise GammaOutOfRange(f"gamma needs {d} entries, got {len(r.gamma)}", station=n)
    denominator = r.mu - base.lam[n % base.stations]
    if denominator <= 0.0:
        raise DivisionByNonpositive(f"mu - lambda_{n} = {denominator} at station {n}")
    lam = np.asarray(base.lam)
    ahead = lam[(n + 1 + np.arange(d)) % base.stations]
    column = (ahead + np.asarray(r.gamma) * r.mu) / denominator
    return _first_column_matrix(column)


def build_matrix_revolver(spec: PollingSpec | ValidatedSpec, r: Regime) -> np.ndarray:
    """
    Wheel matrix A' of the revolver model (d x d).

    Row k of the first column is (lambda_{k+1} + gamma_{k+1} mu) / (mu - lambda_0):
    arrival rates belong to fixed locations, the server never moves.
    """
    base = _base(spec)
    d = base.d
    if len(r.gamma) != d:
        raise GammaOutOfRange(f"gamma needs {d} entries, got {len(r.gamma)}", station=0)
    denominator = r.mu - base.lam[0]
    if denominator <= 0.0:
        raise DivisionByNonpositive(f"mu - lambda_0 = {denominator}")
    column = (np.asarray(base.lam[1:]) + np.asarray(r.gamma) * r.mu) / denominator
    return _first_column_matrix(column)


def build_matrix_gated(spec: PollingSpec | ValidatedSpec, n: int, r: Regime) -> np.ndarray:
    """
    Station matrix for the gated discipline ((d+1) x (d+1)).

    Rows 0..d-1 of the first column: (lambda_[n+k+1] + gamma_{k+1} mu) / mu;
    row d: (lambda_n + gamma_0 mu) / mu, the mass left behind the gate.
    """
    base = _base(spec)
    d = base.d
    if len(r.gamma) != d + 1:
        raise GammaOutOfRange(f"gamma needs {d + 1} entries, got {len(r.gamma)}", station=n)
    if r.mu <= 0.0:
        raise DivisionByNonpositive(f"mu = {r.mu} at station {n}")
    lam = np.asarray(base.lam)
    gamma = np.asarray(r.gamma)
    ahead = lam[(n + 1 + np.arange(d)) % base.stations]
    column = np.empty(d + 1)
    column[:d] = (ahead + gamma[1:] * r.mu) / r.mu
    column[d] = (lam[n % base.stations] + gamma[0] * r.mu) / r.mu
    return _first_column_matrix(column)


def build_station_matrix(spec: PollingSpec | ValidatedSpec, n: int, r: Regime) -> np.ndarray:
    """Dispatch on the discipline: the matrix used at station n with regime r."""
    base = _base(spec)
    if base.discipline == Discipline.GATED:
        return build_matrix_gated(base, n, r)
    if base.discipline == Discipline.REVOLVER:
        return build_matrix_revolver(base, r)
    return build_matrix_exhaustive(base, n, r)


def cycle_product(factors) -> np.ndarray:
    """Ordered product F_d ... F_0 of the factors given station 0 first."""
    factors = list(factors)
    product = np.eye(factors[0].shape[0])
    for factor in factors:
        product = factor @ product
    return product


def compose_cycle(spec: PollingSpec | ValidatedSpec, regimes) -> np.ndarray:
    """
    Cycle matrix A = A^(d) ... A^(0) for one regime per station.

    Args:
        spec: The system
        regimes: One Regime per station, station 0 first

    Example:
        d=1 with station factors 0.5 and 0.5 gives [[0.25]].
    """
    base = _base(spec)
    regimes = list(regimes)
    if len(regimes) != base.stations:
        raise ValueError(f"compose_cycle needs {base.stations} regimes, got {len(regimes)}")
    return cycle_product(build_station_matrix(base, n, r) for n, r in enumerate(regimes))


@lru_cache(maxsize=256)
def atom_matrices(spec: ValidatedSpec, station: int) -> np.ndarray:
    """
    Stack of the station matrices of every atom of the station's law.

    Returns:
        Read-only array of shape (atoms, dim, dim), atoms in declaration order
    """
    law = spec.law(station)
    stack = np.stack([build_station_matrix(spec, station, r) for r in law.regimes])
    stack.setflags(write=False)
    return stack


def dump_matrix(matrix) -> str:
    """Debug dump: plain-text rows of decimal entries, row-major."""
    return format_matrix(matrix)


# --- Spectral radius -------------------------------------------------------

def _power_iteration(matrix: np.ndarray, tol: float, max_iter: int) -> tuple[float, bool]:
    x = np.full(matrix.shape[0], 1.0 / matrix.shape[0])
    previous = None
    estimate = 0.0
    for _ in range(max_iter):
        y = matrix @ x
        total = float(y.sum())
        if total == 0.0:
            # The iterate fell into the kernel: the matrix is nilpotent on the orbit
            return 0.0, True
        estimate = total  # x has unit L1 norm
        x = y / total
        if previous is not None and abs(estimate - previous) <= tol * estimate:
            return estimate, True
        previous = estimate
    return estimate, False


def spectral_radius(m, tol: float | None = None, max_iter: int | None = None) -> float:
    """
    Spectral radius of a nonnegative square matrix by power iteration.

    Starts from the all-ones vector and stops when successive growth
    estimates agree to `tol` (relative). A periodic matrix can make the
    plain iteration oscillate; it is then restarted on M + cI (same Perron
    vector, radius shifted by c).

    Raises:
        NoConvergence: both attempts hit the iteration cap
    """
    tol = settings.POWER_ITER_TOL if tol is None else tol
    max_iter = settings.POWER_ITER_CAP if max_iter is None else max_iter

    matrix = np.atleast_2d(np.asarray(m, dtype=float))
    if matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"matrix must be square, got shape {matrix.shape}")
    if not is_finite_nonnegative(matrix):
        raise ValueError("spectral_radius expects a finite nonnegative matrix")
    if matrix.shape[0] == 1:
        return float(matrix[0, 0])
    if not matrix.any():
        return 0.0

    estimate, converged = _power_iteration(matrix, tol, max_iter)
    if converged:
        return estimate

    shift = float(matrix.max())
    logger.debug(f"Power iteration restarted with shift {shift}")
    shifted, converged = _power_iteration(matrix + shift * np.eye(matrix.shape[0]), tol, max_iter)
    if converged:
        return max(shifted - shift, 0.0)
    raise NoConvergence(f"power iteration did not converge in {max_iter} steps", best_estimate=estimate)


# --- Support scan ----------------------------------------------------------

def scan_transient_support(
    spec: ValidatedSpec,
    cap: int | None = None,
    rand: np.random.Generator | None = None,
    strict: bool = False,
) -> SupportScan:
    """
    Look for one atom per station whose deterministic cycle matrix has
    spectral radius > 1 (a transient homogeneous model), which forces s0 < inf.

    Every combination is enumerated while their number stays within `cap`;
    beyond it `cap` random combinations are checked and the result is
    flagged partial (or SupportTooLarge is raised when strict).

    Returns:
        SupportScan with the first witness found, or the largest radius seen
    """
    cap = settings.SUPPORT_SCAN_CAP if cap is None else cap
    laws = spec.cycle_laws
    sizes = [len(law.atoms) for law in laws]
    total = math.prod(sizes)
    tables = [atom_matrices(spec, n) for n in range(spec.stations)]

    if total <= cap:
        combos = itertools.product(*(range(size) for size in sizes))
        partial = False
    else:
        if strict:
            raise SupportTooLarge(f"{total} support combinations exceed the cap {cap}")
        logger.warning(f"Support has {total} combinations; sampling {cap} of them")
        rand = rand if rand is not None else derive_rng(settings.MASTER_SEED, "support-scan")
        combos = (tuple(int(rand.integers(size)) for size in sizes) for _ in range(cap))
        partial = True

    checked = 0
    best_rho = None
    for combo in combos:
        checked += 1
        matrix = cycle_product(tables[n][j] for n, j in enumerate(combo))
        rho = spectral_radius(matrix)
        if best_rho is None or rho > best_rho:
            best_rho = rho
        if rho > 1.0:
            witness = tuple(laws[n].atoms[j].regime for n, j in enumerate(combo))
            logger.info(f"Transient support combination found: atoms {combo}, rho={rho:.6g}")
            return SupportScan(found=True, witness=witness, rho=rho, checked=checked, total=total, partial=partial)

    return SupportScan(found=False, witness=None, rho=best_rho, checked=checked, total=total, partial=partial)
