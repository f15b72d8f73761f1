"""
Fluid Model - Switch-Epoch Dynamics and Emptying Times

The fluid counterpart of the polling system, driven by the same regime
stream as the stochastic model:
1. drain_time / fluid_step: one switch epoch (the linear map x -> A~(i) x)
2. fluid_empty_time: D_infinity, the time to empty the fluid system
3. ratio_bound_K / check_ratio_bound: the component-ratio bound K
4. norm_sandwich_constants / series_sandwich: norm bounds tying D to the
   series of cycle-matrix products
5. coupling_experiment / drift_check: the fluid model against the
   stochastic one

State layout: x[j] is the level j stations ahead of the server (j < d;
gated keeps all d+1 positions). `carry` is the level right behind the
server; it is only nonzero in a start taken from an arbitrary
configuration and flows into the last component at the first switch.
"""

import logging
import math
from pathlib import Path

import numpy as np

from regen_polling.config import settings
from regen_polling.errors import DivergedFluid, NonpositiveDrain, UnsupportedDiscipline
from regen_polling.models import (
    Configuration,
    CouplingReport,
    Discipline,
    DriftCheck,
    FluidEmptyTime,
    FluidState,
    RatioCheck,
    Regime,
    SeriesSandwich,
    ValidatedSpec,
)
from regen_polling.services.model_core import build_station_matrix, cycle_product
from regen_polling.services.stochastic import (
    RegimeStream,
    apply_event,
    simulate_visit,
    transition_probabilities,
)
from regen_polling.utils.concurrency import map_in_threads
from regen_polling.utils.output import write_csv
from regen_polling.utils.seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)


# --- One epoch -------------------------------------------------------------

def _drain_speed(spec: ValidatedSpec, station: int, r: Regime) -> float:
    if spec.discipline == Discipline.GATED:
        speed = r.mu
    elif spec.discipline == Discipline.REVOLVER:
        speed = r.mu - spec.lam[0]
    else:
        speed = r.mu - spec.lam[station % spec.stations]
    if speed <= 0.0:
        raise NonpositiveDrain(f"drain speed {speed} at station {station}")
    return speed


def _advance(spec: ValidatedSpec, station: int, x: np.ndarray, carry: float, r: Regime) -> tuple[np.ndarray, float]:
    """Explicit switch-epoch update: x'_j = x_{j+1} + (mu gamma_{j+1} + lambda_ahead_{j+1}) T."""
    stations = spec.stations
    d = spec.d
    # The served level drains at mu - lambda (gated: mu, arrivals wait behind the gate)
    drain = float(x[0]) / _drain_speed(spec, station, r)
    lam = np.asarray(spec.lam)
    gamma = np.asarray(r.gamma, dtype=float)

    if spec.discipline == Discipline.GATED:
        ahead = lam[(station + 1 + np.arange(d)) % stations]
        nxt = np.empty(d + 1)
        # Stations ahead shift down one place and fill at their arrival plus feedback rates
        nxt[:d] = x[1:] + (r.mu * gamma[1:] + ahead) * drain
        # The served station reopens at the back with what built up behind the gate
        nxt[d] = (lam[station % stations] + r.mu * gamma[0]) * drain
        return nxt, drain

    anchor = 0 if spec.discipline == Discipline.REVOLVER else station
    ahead = lam[(anchor + 1 + np.arange(d)) % stations]
    # The station just behind the server enters the window as the last component
    shifted = np.append(x[1:], carry)
    return shifted + (r.mu * gamma + ahead) * drain, drain


def drain_time(state: FluidState, r: Regime, spec: ValidatedSpec) -> float:
    """
    Time the server needs to pump out the current station: x0 / (mu - lambda_[i])
    (revolver: mu - lambda_0; gated: x0 / mu).

    Example:
        x0 = 4, lambda = 1, mu = 3 -> 2.0
    """
    return state.x[0] / _drain_speed(spec, state.epoch, r)


def drain_time_bounds(state: FluidState, spec: ValidatedSpec) -> tuple[float, float]:
    """Regime-free bounds x0 / M0 <= T <= x0 / eps0."""
    return state.x[0] / spec.M0, state.x[0] / spec.eps0


def fluid_step(state: FluidState, r: Regime, spec: ValidatedSpec) -> tuple[FluidState, float]:
    """
    Advance the fluid model by one switch epoch under regime r.

    Returns:
        (next state, drain time T); next.epoch = epoch + 1, next.elapsed = elapsed + T

    Example:
        d=2, lambda=(1,1,1), station 0, x=(3,1), mu=4, gamma=(0.25,0.25)
        -> x=(3,2), T=1
    """
    x, drain = _advance(spec, state.epoch, np.asarray(state.x, dtype=float), state.carry, r)
    nxt = FluidState(epoch=state.epoch + 1, x=tuple(x.tolist()), elapsed=state.elapsed + drain, carry=0.0)
    return nxt, drain


def fluid_step_via_matrix(state: FluidState, r: Regime, spec: ValidatedSpec) -> tuple[FluidState, float]:
    """fluid_step computed as x' = A~(i) x, plus the carried level in the last component."""
    matrix = build_station_matrix(spec, state.epoch % spec.stations, r)
    x = matrix @ np.asarray(state.x, dtype=float)
    # The matrix only sees x; the carried level rides on top of the last component
    if spec.discipline != Discipline.GATED:
        x[-1] += state.carry
    drain = drain_time(state, r, spec)
    nxt = FluidState(epoch=state.epoch + 1, x=tuple(x.tolist()), elapsed=state.elapsed + drain, carry=0.0)
    return nxt, drain


def fluid_state_from_queues(spec: ValidatedSpec, cfg: Configuration, epoch: int | None = None) -> FluidState:
    """
    Fluid start matching a stochastic configuration.

    The levels are the queue lengths seen from the server; the station
    right behind the server becomes `carry` (gated keeps it in x).
    """
    if cfg.is_idle:
        return FluidState(epoch=epoch or 0, x=(0.0,) * spec.dim)
    relative = [float(q) for q in cfg.relative()]
    if epoch is None:
        epoch = 0 if spec.discipline == Discipline.REVOLVER else cfg.server
    if spec.discipline == Discipline.GATED:
        return FluidState(epoch=epoch, x=tuple(relative))
    return FluidState(epoch=epoch, x=tuple(relative[: spec.d]), carry=relative[spec.d])


# --- Emptying time ---------------------------------------------------------

def _tail(spec: ValidatedSpec, masses: list[float], times: list[float]) -> tuple[float, bool]:
    """
    Remaining emptying time after the last epoch, continuing the last
    cycle's contraction geometrically. Returns (tail, contracting).
    """
    stations = spec.stations
    if len(masses) > stations and masses[-1 - stations] > 0.0:
        ratio = masses[-1] / masses[-1 - stations]
        if ratio < 1.0:
            # Later cycles shrink by the same ratio: their times form a geometric series
            return math.fsum(times[-stations:]) * ratio / (1.0 - ratio), True
    # Not contracting: a crude bound from draining the remaining mass at eps0
    return masses[-1] * stations / spec.eps0, False


def fluid_empty_time(
    spec: ValidatedSpec,
    init: FluidState,
    stream: RegimeStream,
    rel_tol: float | None = None,
    max_epochs: int | None = None,
    trace: list | None = None,
) -> FluidEmptyTime:
    """
    D_infinity: sum of the drain times until the fluid system is empty.

    Stops once the mass falls below rel_tol x the initial mass and adds the
    remaining time as a geometric tail estimate from the last cycle's
    contraction. Returns a diverged result when the mass exceeds
    FLUID_DIVERGENCE_FACTOR x the initial mass, or when max_epochs is
    reached without contraction.

    Args:
        trace: Optional list collecting (epoch, station, time, x, drain) rows

    Example:
        d=1, lambda=(1,1), mu=3, gamma=0, x=(4,) -> D=4, partial sums 2, 3, 3.5, ...
    """
    rel_tol = settings.FLUID_REL_TOL if rel_tol is None else rel_tol
    max_epochs = settings.FLUID_MAX_EPOCHS if max_epochs is None else max_epochs
    factor = settings.FLUID_DIVERGENCE_FACTOR

    start = init.mass
    if start == 0.0:
        return FluidEmptyTime(D=0.0, diverged=False, epochs=0)

    stations = spec.stations
    x = np.asarray(init.x, dtype=float)
    carry = init.carry
    epoch = init.epoch
    total = 0.0
    partial: list[float] = []
    masses = [start]
    times: list[float] = []

    for step in range(max_epochs):
        mass = masses[-1]
        if mass < rel_tol * start:
            tail, _ = _tail(spec, masses, times)
            return FluidEmptyTime(
                D=total + tail, diverged=False, epochs=step, partial_sums=tuple(partial),
                tail_estimate=tail, tail_error=tail, truncated=True,
            )
        if mass > factor * start:
            logger.debug(f"Fluid mass grew {mass / start:.3g}x after {step} epochs")
            return FluidEmptyTime(D=None, diverged=True, epochs=step, partial_sums=tuple(partial))

        regime = stream[epoch]
        x_next, drain = _advance(spec, epoch % stations, x, carry, regime)
        if trace is not None:
            trace.append((epoch, epoch % stations, init.elapsed + total, tuple(x.tolist()), drain))
        # Only the first epoch can carry a level in from a stochastic start
        x, carry = x_next, 0.0
        total += drain
        partial.append(total)
        masses.append(float(x.sum()))
        times.append(drain)
        epoch += 1

    tail, contracting = _tail(spec, masses, times)
    if not contracting:
        logger.debug(f"Fluid not contracting after {max_epochs} epochs")
        return FluidEmptyTime(D=None, diverged=True, epochs=max_epochs, partial_sums=tuple(partial))
    return FluidEmptyTime(
        D=total + tail, diverged=False, epochs=max_epochs, partial_sums=tuple(partial),
        tail_estimate=tail, tail_error=tail, truncated=True,
    )


def write_fluid_trace(path: str | Path, spec: ValidatedSpec, trace: list, seed: int) -> Path:
    """Fluid trace CSV: epoch,station,time,x0,...,x{k},drain."""
    width = spec.dim
    header = ["epoch", "station", "time"] + [f"x{j}" for j in range(width)] + ["drain"]
    rows = (
        [epoch, station, repr(time)] + [repr(v) for v in levels[:width]] + [repr(drain)]
        for epoch, station, time, levels, drain in trace
    )
    return write_csv(path, header, rows, seed)


# --- Bounds ----------------------------------------------------------------

def ratio_bound_K(spec: ValidatedSpec) -> float:
    """
    Bound on x_n / x_m after the first cycle:
    K = (1 + (lam_max + 1) / eps0)^(d+1) * (d+1) * M0^2 / lam_min^2.

    Example:
        d=1, lam_max=lam_min=1, eps0=0.25, M0=3 -> 1458
    """
    # Gated fluid states keep all d+1 levels (the served station comes back
    # behind the gate), so the bound is taken over the state dimension: d for
    # exhaustive and revolver, d+1 for gated
    d = spec.dim
    return (1.0 + (spec.lam_max + 1.0) / spec.eps0) ** (d + 1) * (d + 1) * spec.M0 ** 2 / spec.lam_min ** 2


def check_ratio_bound(spec: ValidatedSpec, init: FluidState, stream: RegimeStream, epochs: int) -> RatioCheck:
    """
    Track max_j x_j / min_j x_j over the epochs after the first d and
    compare with ratio_bound_K. Epochs with an exactly zero component are
    counted and skipped. The state is renormalised every epoch, which
    leaves the ratios unchanged.
    """
    K = ratio_bound_K(spec)
    stations = spec.stations
    x = np.asarray(init.x, dtype=float)
    carry = init.carry
    worst = 1.0
    zero_epochs = 0
    checked = 0

    for step in range(epochs):
        epoch = init.epoch + step
        x, _ = _advance(spec, epoch % stations, x, carry, stream[epoch])
        carry = 0.0
        mass = x.sum()
        if mass > 0.0:
            x = x / mass
        # The first d epochs still hold levels from the arbitrary start
        if step + 1 <= spec.d:
            continue
        if np.any(x == 0.0):
            zero_epochs += 1
            continue
        checked += 1
        worst = max(worst, float(x.max() / x.min()))

    if zero_epochs:
        logger.warning(f"{zero_epochs} epochs had a zero fluid component and were skipped")
    return RatioCheck(max_ratio=worst, K=K, ok=worst <= K, epochs_checked=checked, zero_component_epochs=zero_epochs)


def norm_sandwich_constants(spec: ValidatedSpec) -> tuple[float, float]:
    """
    C1, C2 with C1 ||x|| <= ||x'|| <= C2 ||x|| at every switch epoch:
    C1 = min(1, m lam_min / M0), C2 = max(1, (m lam_max + M0) / eps0),
    where m = d stations ahead (d + 1 for gated).
    """
    ahead = spec.d + 1 if spec.discipline == Discipline.GATED else spec.d
    c1 = min(1.0, ahead * spec.lam_min / spec.M0)
    c2 = max(1.0, (ahead * spec.lam_max + spec.M0) / spec.eps0)
    return c1, c2


def series_sandwich(spec: ValidatedSpec, init: FluidState, stream: RegimeStream, cycles: int = 50) -> SeriesSandwich:
    """
    Compare the fluid time after n+1 full cycles with the norm of the series
    L_{n-1} = B_0 + B_1 B_0 + ... + B_{n-1} ... B_0, where B_m is the cycle
    matrix read off the same stream, for n = 1..cycles.

    Every ratio D / ||L_{n-1}|| lies in [U1, U2] with
    U1 = min(x) / M0 and U2 = (1 + C2 + ... + C2^d) ||x|| (1 + 1 / ||B_0||) / eps0.
    """
    if init.carry:
        raise ValueError("series_sandwich needs a start at a switch epoch (carry = 0)")
    stations = spec.stations
    _, c2 = norm_sandwich_constants(spec)
    x = np.asarray(init.x, dtype=float)
    epoch = init.epoch
    total = 0.0
    product = np.eye(spec.dim)
    series = np.zeros((spec.dim, spec.dim))
    first_norm = None
    ratios = []

    for m in range(cycles + 1):
        for _ in range(stations):
            x, drain = _advance(spec, epoch % stations, x, 0.0, stream[epoch])
            total += drain
            epoch += 1
        # D after m+1 cycles against ||L_{m-1}||
        if m >= 1:
            ratios.append(total / float(series.sum()))
        if m == cycles:
            break
        start = init.epoch + m * stations
        block = cycle_product(
            build_station_matrix(spec, (start + j) % stations, stream[start + j]) for j in range(stations)
        )
        if first_norm is None:
            first_norm = float(block.sum())
        product = block @ product
        series += product

    u1 = min(init.x) / spec.M0
    u2 = math.fsum(c2 ** j for j in range(stations)) * init.mass * (1.0 + 1.0 / first_norm) / spec.eps0
    slack = 1e-9
    ok = all(u1 * (1 - slack) <= v <= u2 * (1 + slack) for v in ratios)
    return SeriesSandwich(ratios=tuple(ratios), U1=u1, U2=u2, ok=ok)


# --- Fluid against stochastic ----------------------------------------------

def coupling_experiment(
    spec: ValidatedSpec,
    y0: float,
    delta: float,
    replicas: int,
    seed: int | None = None,
    threads: int = 1,
) -> CouplingReport:
    """
    Run one stochastic visit and one fluid epoch from the same start and
    the same regime, and count how often they stay within delta * y0.

    Every station starts with ceil(y0) customers and the server at station 0.
    Compared per replica: the time to empty the first station against the
    fluid drain time, and the queue vector after the switch against the
    fluid levels (component-wise).

    Returns:
        CouplingReport with both frequencies and V fitted from
        1 - freq = exp(-V y0) (None when freq is 1)
    """
    master = settings.MASTER_SEED if seed is None else seed
    level = math.ceil(y0)
    gated = spec.discipline == Discipline.GATED
    cfg = Configuration(server=0, queues=(level,) * spec.stations, gate=level if gated else None)
    state = fluid_state_from_queues(spec, cfg, epoch=0)
    bound = delta * y0

    def one(replica: int) -> tuple[bool, bool]:
        replica_seed = derive_seed(master, "couple", replica)
        regime = RegimeStream(spec, replica_seed)[0]
        visit = simulate_visit(spec, cfg, regime, derive_rng(replica_seed, "jumps"))
        nxt, drain = fluid_step(state, regime, spec)
        # Queue vector seen from the next station
        after = np.roll(visit.relative, -1) if gated else visit.relative[1:]
        within_time = abs(visit.duration - drain) <= bound
        within_vector = bool(np.max(np.abs(after - np.asarray(nxt.x))) <= bound)
        return within_time, within_vector

    outcomes = map_in_threads(one, range(replicas), threads)
    freq = sum(t for t, _ in outcomes) / replicas
    freq_vector = sum(v for _, v in outcomes) / replicas

    def fit(frequency: float) -> float | None:
        if frequency >= 1.0:
            return None
        return -math.log(1.0 - frequency) / y0

    logger.info(f"Coupling y0={y0} delta={delta}: time within {freq:.4f}, vector within {freq_vector:.4f}")
    return CouplingReport(
        replicas=replicas,
        y0=y0,
        delta=delta,
        freq_within=freq,
        freq_vector_within=freq_vector,
        fitted_V=fit(freq),
        fitted_V_vector=fit(freq_vector),
    )


def drift_check(
    spec: ValidatedSpec,
    cfg: Configuration,
    r: Regime,
    stream: RegimeStream,
    replicas: int = 0,
    index: int | None = None,
    rand: np.random.Generator | None = None,
) -> DriftCheck:
    """
    One-step drift of f(S) = fluid emptying time from S, under the
    embedded chain, with the regime stream held fixed.

    The server at `cfg` works under r as regime number `index` (default:
    the server's station). With replicas = 0 every outcome of the step is
    enumerated and weighted by its probability, so the drift is exact up to
    the fluid truncation error; otherwise `replicas` outcomes are sampled.
    The exact value is -1/Z with Z = mu + sum(lambda).

    Raises:
        UnsupportedDiscipline: for gated systems
        DivergedFluid: some branch has an infinite fluid emptying time
    """
    if spec.discipline == Discipline.GATED:
        raise UnsupportedDiscipline("drift_check covers the exhaustive and revolver models")
    if cfg.is_idle:
        raise ValueError("drift_check needs a nonempty configuration")

    if index is None:
        index = 0 if spec.discipline == Discipline.REVOLVER else cfg.server
    fixed = stream.with_fixed(index, r)

    def f(config: Configuration, at: int) -> tuple[float, float]:
        if config.is_idle:
            return 0.0, 0.0
        result = fluid_empty_time(spec, fluid_state_from_queues(spec, config, epoch=at), fixed)
        if result.diverged:
            raise DivergedFluid(f"fluid emptying time diverged from {config.queues}")
        return result.D, result.tail_error

    current, error = f(cfg, index)
    kernel = transition_probabilities(spec, cfg.server, r)

    if replicas > 0:
        rand = rand if rand is not None else derive_rng(settings.MASTER_SEED, "drift")
        draws = np.searchsorted(kernel.cumulative, rand.random(replicas), side="right")
        counts = np.bincount(draws, minlength=len(kernel.labels))
        weights = counts / replicas
    else:
        weights = kernel.probs

    drift = 0.0
    outcomes = 0
    # E[f(next)] - f(current) over the step outcomes; a hop moves the regime index on
    for k, weight in enumerate(weights):
        if weight == 0.0:
            continue
        step = apply_event(spec, cfg, r, k)
        value, branch_error = f(step.config, index + step.hops)
        drift += weight * (value - current)
        error += weight * branch_error
        outcomes += 1

    target = -1.0 / kernel.rate
    eps_hat = 1.0 / (math.fsum(spec.lam) + spec.M0)
    logger.debug(f"Drift {drift:.12g} against {target:.12g} over {outcomes} outcomes")
    return DriftCheck(drift=drift, target=target, error_bound=error, eps_hat=eps_hat, outcomes=outcomes)
