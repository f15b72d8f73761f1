"""
Stochastic Model - Embedded Jump Chain Simulation

This module simulates the continuous-time polling process exactly:
1. RegimeStream: the pre-drawn regime sequence R_0, R_1, ... shared with the fluid model
2. transition_probabilities / step_embedded: one step of the embedded jump chain
3. run_until_empty: a run until the system empties (tau), with switch epochs
4. estimate_tau_stats / tail_slope: moments of tau and its tail exponent

Time advances by the embedded chain plus exponential holding times: while
the server works under regime (mu, gamma) the total event rate is the
constant Z = mu + sum(lambda), so m events take a Gamma(m, 1/Z) time.
A whole visit is simulated in vectorised blocks of events, which is
distributionally the same as iterating step_embedded.

Event categories are sampled by inverse CDF in the fixed order
arrivals (relative station 0..d), feedbacks (1..d, gated 0..d), departure.
"""

import logging
import math
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import stats

from regen_polling.config import settings
from regen_polling.errors import GammaOutOfRange, InsufficientTail, InvalidState
from regen_polling.models import (
    Configuration,
    Discipline,
    Regime,
    ReplicaResult,
    RunRecord,
    StepResult,
    SwitchEpoch,
    TailFit,
    TauMoment,
    TauStats,
    ValidatedSpec,
)
from regen_polling.utils.concurrency import map_in_threads
from regen_polling.utils.output import write_csv
from regen_polling.utils.seeding import derive_rng, derive_seed, value_index

logger = logging.getLogger(__name__)

REGIME_BLOCK = 1024
MAX_EVENT_BLOCK = 1 << 20

# Partial means growing faster than n**0.2 are reported as diverging
DIVERGENCE_EXPONENT = 0.2
MIN_TAIL_SAMPLES = 1000


# --- Regime stream ---------------------------------------------------------

class RegimeStream:
    """
    Lazily materialised regime sequence for one system.

    R_i has law nu_[i] (the wheel's law for revolver) and is a pure function
    of (seed, i): regimes are drawn in blocks of REGIME_BLOCK indices, block
    b from its own SeedSequence child, so the value at an index never
    depends on the order in which indices are read.
    """

    def __init__(self, spec: ValidatedSpec, seed: int, fixed: dict[int, Regime] | None = None):
        self.spec = spec
        self.seed = int(seed)
        self._fixed = dict(fixed or {})
        self._laws = [spec.law(n) for n in range(spec.stations)]
        self._cumulative = [np.cumsum(law.weights) for law in self._laws]
        self._random = any(not law.is_degenerate for law in self._laws)
        self._blocks: dict[int, np.ndarray] = {}

    def _block(self, b: int) -> np.ndarray:
        block = self._blocks.get(b)
        if block is not None:
            return block

        # Atom 0 everywhere unless some law has more than one atom
        block = np.zeros(REGIME_BLOCK, dtype=np.int64)
        if self._random:
            rand = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(b,)))
            u = rand.random(REGIME_BLOCK)
            # One uniform per index; each station reads its own slots by inverse CDF
            stations = (b * REGIME_BLOCK + np.arange(REGIME_BLOCK)) % len(self._laws)
            for n, cumulative in enumerate(self._cumulative):
                if cumulative.size == 1:
                    continue
                mask = stations == n
                picks = np.searchsorted(cumulative, u[mask] * cumulative[-1], side="right")
                block[mask] = np.minimum(picks, cumulative.size - 1)
        self._blocks[b] = block
        return block

    def atom_index(self, i: int) -> int:
        """Index of the atom R_i was drawn as, within the law of station [i]."""
        if i < 0:
            raise IndexError(f"regime index must be >= 0, got {i}")
        return int(self._block(i // REGIME_BLOCK)[i % REGIME_BLOCK])

    def __getitem__(self, i: int) -> Regime:
        if i in self._fixed:
            # Overrides (coupling runs) never touch the drawn blocks
            return self._fixed[i]
        law = self._laws[i % len(self._laws)]
        return law.atoms[self.atom_index(i)].regime

    def take(self, start: int, count: int) -> list[Regime]:
        return [self[i] for i in range(start, start + count)]

    def with_fixed(self, index: int, regime: Regime) -> "RegimeStream":
        """Same stream with R_index replaced by `regime` (drawn blocks are shared)."""
        other = RegimeStream(self.spec, self.seed, {**self._fixed, index: regime})
        other._blocks = self._blocks
        return other


# --- Embedded chain --------------------------------------------------------

class EventKernel(NamedTuple):
    """
    Law of one embedded-chain step at a station under a fixed regime.

    effect[k] is the queue change of category k seen from the server
    (index 0 = the served station); served_delta[k] the change of the
    served count (queue at the server, or the gate count for gated).
    """
    labels: tuple[str, ...]
    probs: np.ndarray
    cumulative: np.ndarray
    effect: np.ndarray
    served_delta: np.ndarray
    total_delta: np.ndarray
    rate: float

    @property
    def table(self) -> dict[str, float]:
        return dict(zip(self.labels, self.probs.tolist()))

    @property
    def drain_per_event(self) -> float:
        """Expected decrease of the served count per event."""
        return float(-(self.probs @ self.served_delta))


def _readonly(*arrays):
    for array in arrays:
        array.setflags(write=False)


@lru_cache(maxsize=4096)
def transition_probabilities(spec: ValidatedSpec, station: int, regime: Regime) -> EventKernel:
    """
    Embedded-chain category law with the server at `station` under `regime`.

    Rates: arrival at relative station i -> lambda_[N+i]; feedback to
    relative station i -> mu * gamma_i; departure -> mu * (1 - sum(gamma)),
    all divided by Z = mu + sum(lambda). For the revolver the server sits at
    location 0 and location i has arrival rate lambda_i.

    Example:
        d=1, lambda=(1,1), station 0, mu=3, gamma=(0.4,):
        arrival:0 0.2, arrival:1 0.2, feedback:1 0.24, departure 0.36
    """
    if len(regime.gamma) != spec.dim:
        raise GammaOutOfRange(f"gamma needs {spec.dim} entries, got {len(regime.gamma)}", station=station)

    stations = spec.stations
    gated = spec.discipline == Discipline.GATED
    anchor = 0 if spec.discipline == Discipline.REVOLVER else station % stations
    lam = np.asarray(spec.lam)[(anchor + np.arange(stations)) % stations]
    mu = regime.mu
    gamma = np.asarray(regime.gamma, dtype=float)

    # Gated feedback may go back to the served station (behind the gate)
    offsets = list(range(0, stations)) if gated else list(range(1, stations))
    leave = max(0.0, 1.0 - math.fsum(regime.gamma))
    rates = np.concatenate([lam, mu * gamma, [mu * leave]])
    rate = mu + math.fsum(spec.lam)
    probs = rates / rate

    labels = tuple(
        [f"arrival:{i}" for i in range(stations)]
        + [f"feedback:{k}" for k in offsets]
        + ["departure"]
    )

    # Rows: arrivals, feedbacks, departure. Columns: stations seen from the server
    effect = np.zeros((len(labels), stations), dtype=np.int64)
    effect[np.arange(stations), np.arange(stations)] = 1
    for row, k in enumerate(offsets, start=stations):
        effect[row, 0] -= 1
        effect[row, k] += 1
    effect[-1, 0] = -1

    if gated:
        # Arrivals at the served station queue behind the gate
        served_delta = np.zeros(len(labels), dtype=np.int64)
        served_delta[stations:] = -1
    else:
        served_delta = effect[:, 0].copy()

    # Pin the last bin so rounding never lets a uniform fall off the end
    cumulative = np.cumsum(probs)
    cumulative[-1] = 1.0
    total_delta = effect.sum(axis=1)
    _readonly(probs, cumulative, effect, served_delta, total_delta)
    return EventKernel(labels, probs, cumulative, effect, served_delta, total_delta, rate)


def leave_idle(spec: ValidatedSpec, rand: np.random.Generator) -> tuple[Configuration, float, int]:
    """
    Exit from the idle state: after an Exp(sum(lambda)) time a customer
    arrives at station n with probability lambda_n / sum(lambda).

    Returns:
        (configuration, elapsed time, station of the arrival). For the
        revolver the wheel turns so the new customer sits at the server.
    """
    lam = np.asarray(spec.lam)
    total = float(lam.sum())
    elapsed = float(rand.exponential(1.0 / total))
    cumulative = np.cumsum(lam) / total
    station = min(int(np.searchsorted(cumulative, rand.random(), side="right")), spec.stations - 1)

    queues = [0] * spec.stations
    server = 0 if spec.discipline == Discipline.REVOLVER else station
    queues[server] = 1
    gate = 1 if spec.discipline == Discipline.GATED else None
    return Configuration(server=server, queues=tuple(queues), gate=gate), elapsed, station


def _relocate(spec: ValidatedSpec, queues: np.ndarray, server: int) -> tuple[int | None, int, np.ndarray]:
    """
    Move the server once its station is done: the next nonempty station
    clockwise (gated may come back round to its own station).

    Returns:
        (new server or None when empty, stations passed, queues); the
        revolver keeps the server at 0 and rotates the queues instead
    """
    if not queues.any():
        return None, 0, queues
    stations = spec.stations
    reach = stations if spec.discipline == Discipline.GATED else stations - 1
    # Walk clockwise to the first nonempty station
    hop = 1
    while hop < reach and queues[(server + hop) % stations] == 0:
        hop += 1
    if spec.discipline == Discipline.REVOLVER:
        return 0, hop, np.roll(queues, -hop)
    return (server + hop) % stations, hop, queues


def _served_count(spec: ValidatedSpec, cfg: Configuration) -> int:
    if spec.discipline == Discipline.GATED and cfg.gate is not None:
        return cfg.gate
    return cfg.queues[cfg.server]


def step_embedded(cfg: Configuration, r: Regime, spec: ValidatedSpec, rand: np.random.Generator) -> StepResult:
    """
    One embedded-chain transition from `cfg` with the server under regime `r`.

    When the served station empties (gated: the gate count reaches zero)
    the server moves on to the next nonempty station in the same step and
    StepResult.hops counts the stations passed; drawing the regimes for
    them is up to the caller. From the idle state the step is an arrival.

    Raises:
        InvalidState: the configuration does not fit the spec
    """
    stations = spec.stations
    if len(cfg.queues) != stations:
        raise InvalidState(f"configuration has {len(cfg.queues)} queues, spec has {stations} stations")

    if cfg.is_idle:
        config, _, station = leave_idle(spec, rand)
        return StepResult(config=config, event=f"arrival:{station}", hops=0)

    kernel = transition_probabilities(spec, cfg.server, r)
    k = int(np.searchsorted(kernel.cumulative, rand.random(), side="right"))
    return apply_event(spec, cfg, r, k)


def apply_event(spec: ValidatedSpec, cfg: Configuration, r: Regime, k: int) -> StepResult:
    """Deterministic part of step_embedded: apply event category k of the kernel."""
    if cfg.is_idle:
        raise InvalidState("no service event from the idle configuration")
    server = cfg.server
    if spec.discipline == Discipline.REVOLVER and server != 0:
        raise InvalidState("the revolver server sits at location 0")

    kernel = transition_probabilities(spec, server, r)
    # The kernel effect is relative to the server; roll it back to absolute stations
    queues = np.asarray(cfg.queues, dtype=np.int64) + np.roll(kernel.effect[k], server)
    served = _served_count(spec, cfg) + int(kernel.served_delta[k])
    gated = spec.discipline == Discipline.GATED

    # Still work at this station: the server stays put
    if served > 0:
        config = Configuration(server=server, queues=tuple(int(q) for q in queues), gate=served if gated else None)
        return StepResult(config=config, event=kernel.labels[k], hops=0)

    new_server, hops, queues = _relocate(spec, queues, server)
    # A gated server closes the gate on whatever is waiting when it arrives
    gate = int(queues[new_server]) if gated and new_server is not None else None
    config = Configuration(server=new_server, queues=tuple(int(q) for q in queues), gate=gate)
    return StepResult(config=config, event=kernel.labels[k], hops=hops)


# --- Visits ----------------------------------------------------------------

class VisitOutcome(NamedTuple):
    relative: np.ndarray
    events: int
    duration: float
    peak_total: int
    emptied: bool


def _serve_visit(
    kernel: EventKernel,
    relative: np.ndarray,
    served: int,
    rand: np.random.Generator,
    max_events: int,
) -> VisitOutcome:
    """
    Simulate one visit in blocks of events until the served count hits 0.

    The served count moves by -1, 0 or +1 per event, so the first zero of
    its running sum is exactly where the visit ends.
    """
    relative = relative.copy()
    total = int(relative.sum())
    peak = total
    events = 0
    emptied = False
    drain = max(kernel.drain_per_event, 1e-12)

    while events < max_events:
        # Size the block to about the expected remaining visit length
        block = min(int(served / drain * 1.2) + 64, MAX_EVENT_BLOCK, max_events - events)
        categories = np.searchsorted(kernel.cumulative, rand.random(block), side="right")
        # Running served count; its first zero ends the visit
        walk = served + np.cumsum(kernel.served_delta[categories])
        hits = np.flatnonzero(walk == 0)
        if hits.size:
            # Throw away the events drawn past the end of the visit
            categories = categories[: hits[0] + 1]
            emptied = True

        # Queue changes depend only on how many events of each category happened
        relative += np.bincount(categories, minlength=len(kernel.labels)) @ kernel.effect
        running = total + np.cumsum(kernel.total_delta[categories])
        peak = max(peak, int(running.max()))
        total = int(running[-1])
        served = int(walk[categories.size - 1])
        events += categories.size
        if emptied:
            break

    # Every event takes an Exp(Z) holding time, so the visit lasts Gamma(events, 1/Z)
    duration = float(rand.gamma(events, 1.0 / kernel.rate)) if events else 0.0
    return VisitOutcome(relative, events, duration, peak, emptied)


def simulate_visit(
    spec: ValidatedSpec,
    cfg: Configuration,
    r: Regime,
    rand: np.random.Generator,
    max_events: int = 1 << 40,
) -> VisitOutcome:
    """
    Serve the current station under regime `r` until it is done, without
    moving the server on. `relative` in the result is the queue vector seen
    from the served station at the end of the visit.
    """
    if cfg.is_idle:
        raise InvalidState("no visit from the idle configuration")
    kernel = transition_probabilities(spec, cfg.server, r)
    relative = np.asarray(cfg.relative(), dtype=np.int64)
    return _serve_visit(kernel, relative, _served_count(spec, cfg), rand, max_events)


# --- Runs ------------------------------------------------------------------

def run_until_empty(
    spec: ValidatedSpec,
    init: Configuration,
    stream: RegimeStream,
    horizon: int,
    rand: np.random.Generator,
    record_epochs: bool = True,
) -> RunRecord:
    """
    Run the process from `init` until every queue is empty.

    The server at station [i] works under R_i. Passing k stations on a
    switch consumes k regimes and records k switch epochs at the same time
    (the skipped stations get a zero-length stay). The horizon is counted in
    embedded events; hitting it returns a censored record whose tau is the
    time reached.

    Example:
        An idle init returns tau=0 with no events.
    """
    if init.is_idle:
        return RunRecord(tau=0.0, censored=False, horizon=horizon, event_count=0, peak_total=0)

    stations = spec.stations
    gated = spec.discipline == Discipline.GATED
    queues = np.asarray(init.queues, dtype=np.int64)
    server = init.server
    # Revolver: turn the wheel so the server starts at location 0
    if spec.discipline == Discipline.REVOLVER and server != 0:
        queues = np.roll(queues, -server)
        server = 0
    # Regime index i belongs to station i mod (d+1), so the first visit uses R_server
    index = server
    gate = (init.gate if init.gate is not None else int(queues[server])) if gated else None

    time = 0.0
    events = 0
    peak = int(queues.sum())
    epochs: list[SwitchEpoch] = []
    if record_epochs:
        epochs.append(SwitchEpoch(index=index, station=index % stations, time=0.0, xi=tuple(np.roll(queues, -server).tolist())))
    regime = stream[index]

    while True:
        kernel = transition_probabilities(spec, server, regime)
        relative = np.roll(queues, -server)
        served = gate if gated else int(relative[0])
        visit = _serve_visit(kernel, relative, served, rand, horizon - events)
        events += visit.events
        time += visit.duration
        peak = max(peak, visit.peak_total)
        queues = np.roll(visit.relative, server)

        # Out of events before the station emptied: censored at the time reached
        if not visit.emptied:
            logger.debug(f"Run censored after {events} events at t={time:.6g}")
            return RunRecord(
                tau=time, censored=True, horizon=horizon, event_count=events,
                peak_total=peak, switch_epochs=tuple(epochs),
            )

        before = queues
        server_next, hops, queues = _relocate(spec, queues, server)
        if server_next is None:
            return RunRecord(
                tau=time, censored=False, horizon=horizon, event_count=events,
                peak_total=peak, switch_epochs=tuple(epochs),
            )

        # Each station passed consumes its regime and gets an epoch at the same time
        for hop in range(1, hops + 1):
            index += 1
            regime = stream[index]
            if record_epochs:
                view = np.roll(before, -((server + hop) % stations))
                epochs.append(SwitchEpoch(index=index, station=index % stations, time=time, xi=tuple(view.tolist())))
        server = server_next
        if gated:
            gate = int(queues[server])


def _run_replica(spec: ValidatedSpec, init: Configuration, horizon: int, master: int, replica: int) -> ReplicaResult:
    seed = derive_seed(master, "tau", replica)
    stream = RegimeStream(spec, seed)
    record = run_until_empty(spec, init, stream, horizon, derive_rng(seed, "jumps"), record_epochs=False)
    return ReplicaResult(
        replica=replica,
        seed=seed,
        tau=record.tau,
        censored=record.censored,
        events=record.event_count,
        peak_total=record.peak_total,
    )


def _doubling_sizes(count: int, start: int = 100) -> list[int]:
    sizes = []
    size = min(start, count)
    while size < count:
        sizes.append(size)
        size *= 2
    sizes.append(count)
    return sizes


def _tau_moment(taus: np.ndarray, s: float, censored_fraction: float, rand: np.random.Generator) -> TauMoment:
    if taus.size == 0:
        return TauMoment(
            s=s, mean=None, uncensored=0, censored_fraction=censored_fraction,
            partial_means=(), growth_exponent=None, diverging=False,
        )

    values = taus ** s
    sizes = _doubling_sizes(values.size)
    partial = tuple((m, float(values[:m].mean())) for m in sizes)

    growth = 0.0
    if s > 0 and len(sizes) >= 3:
        # Median over shuffles of log partial means: the typical growth in n,
        # not the accident of where the largest sample fell in replica order
        shuffled = rand.permuted(np.tile(values, (16, 1)), axis=1)
        index = np.asarray(sizes)
        means = np.cumsum(shuffled, axis=1)[:, index - 1] / index
        typical = np.median(np.log(np.maximum(means, np.finfo(float).tiny)), axis=0)
        growth = float(stats.linregress(np.log(index), typical).slope)

    return TauMoment(
        s=s,
        mean=float(values.mean()),
        uncensored=int(values.size),
        censored_fraction=censored_fraction,
        partial_means=partial,
        growth_exponent=growth if s > 0 and len(sizes) >= 3 else (0.0 if s == 0 else None),
        diverging=growth > DIVERGENCE_EXPONENT,
    )


def estimate_tau_stats(
    spec: ValidatedSpec,
    init: Configuration,
    s_list,
    replicas: int,
    horizon: int,
    seed: int | None = None,
    threads: int = 1,
) -> TauStats:
    """
    Empirical E[tau^s] over independent replicas.

    Replica r uses the child seed derive_seed(seed, "tau", r) for both its
    regime stream and its jump chain. Censored runs are left out of the
    means and counted. Per s the result carries the partial means at
    doubling sample sizes and their growth exponent in n; a growth above
    n**0.2 flags the moment as diverging.
    """
    master = settings.MASTER_SEED if seed is None else seed
    # Chunking only groups work; results come back in replica order
    chunks = np.array_split(np.arange(replicas), max(1, min(replicas, 4 * threads)))

    def run_chunk(chunk):
        return [_run_replica(spec, init, horizon, master, int(r)) for r in chunk]

    samples = [result for part in map_in_threads(run_chunk, chunks, threads) for result in part]
    taus = np.array([r.tau for r in samples if not r.censored])
    censored = replicas - taus.size
    fraction = censored / replicas if replicas else 0.0
    if censored:
        logger.warning(f"{censored} of {replicas} runs censored at {horizon} events")
    if replicas and taus.size == 0:
        logger.warning("Every run was censored: no tau moments available")

    moments = tuple(
        _tau_moment(taus, float(s), fraction, derive_rng(master, "tau-moments", value_index(s)))
        for s in s_list
    )
    for moment in moments:
        logger.info(f"E[tau^{moment.s}] = {moment.mean} (growth exponent {moment.growth_exponent})")

    return TauStats(
        replicas=replicas,
        censored=censored,
        all_censored=replicas > 0 and taus.size == 0,
        moments=moments,
        samples=tuple(samples),
    )


def tail_slope(tau_samples) -> TailFit:
    """
    Log-log slope of the empirical survival function over its top tail.

    The fit uses the points with survival in [10/n, 0.1]. A power tail has
    a straight log-log survival; an exponential one keeps steepening, so the
    fit is flagged "no power tail" when the slope of the upper half exceeds
    1.5x the slope of the lower half or r^2 < 0.9.

    Raises:
        InsufficientTail: fewer than 1000 finite positive samples
    """
    samples = np.sort(np.asarray(tau_samples, dtype=float))
    samples = samples[np.isfinite(samples) & (samples > 0)]
    n = samples.size
    if n < MIN_TAIL_SAMPLES:
        raise InsufficientTail(f"need at least {MIN_TAIL_SAMPLES} uncensored samples, got {n}")

    survival = (n - np.arange(n)) / n
    window = (survival <= 0.1) & (survival >= 10.0 / n)
    log_t = np.log(samples[window])
    log_s = np.log(survival[window])

    fit = stats.linregress(log_t, log_s)
    middle = 0.5 * (log_s.max() + log_s.min())
    lower = log_s >= middle
    lower_slope = float(stats.linregress(log_t[lower], log_s[lower]).slope)
    upper_slope = float(stats.linregress(log_t[~lower], log_s[~lower]).slope)
    r2 = float(fit.rvalue ** 2)
    power_tail = r2 >= 0.9 and abs(upper_slope) <= 1.5 * abs(lower_slope)

    return TailFit(
        slope=float(fit.slope),
        t_lo=float(samples[window][0]),
        t_hi=float(samples[window][-1]),
        r2=r2,
        lower_slope=lower_slope,
        upper_slope=upper_slope,
        power_tail=power_tail,
        samples_used=int(window.sum()),
    )


def write_tau_csv(path: str | Path, tau_stats: TauStats, seed: int) -> Path:
    """One row per replica: replica,seed,tau,censored,events,peak_total."""
    rows = (
        (r.replica, r.seed, repr(r.tau), int(r.censored), r.events, r.peak_total)
        for r in tau_stats.samples
    )
    return write_csv(path, ("replica", "seed", "tau", "censored", "events", "peak_total"), rows, seed)
