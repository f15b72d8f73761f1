"""
Domain Models for the Polling Stability Toolkit

This module defines the immutable Pydantic models shared by every service:
- Regime / Atom / RegimeLaw: service regimes and their finite-support laws
- PollingSpec / ValidatedSpec: the system and its Condition E constants
- Configuration / SwitchEpoch / RunRecord: the stochastic model
- FluidState / FluidEmptyTime: the fluid model
- KEstimate / TopExponent / S0Estimate / LyapunovReport: moment growth rates
- ExperimentPlan and friends: the plan-file schema

All models are frozen so they can be shared between threads and used as
cache keys. Matrices are plain numpy arrays and never stored on models.
"""

import math
from enum import Enum
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from regen_polling.config import settings


class Discipline(str, Enum):
    """Service discipline of the polling system."""
    EXHAUSTIVE = "exhaustive"
    REVOLVER = "revolver"
    GATED = "gated"


class Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# --- Regimes ---------------------------------------------------------------

class Regime(Frozen):
    """
    One service regime (mu, gamma).

    gamma has length d for exhaustive/revolver (destinations 1..d ahead of
    the server) and length d+1 for gated (gamma[0] = same station, behind
    the gate). Domain invariants (mu > 0, gamma in range) are checked by
    validate_spec so that violations can be reported per station and atom.
    """
    mu: float
    gamma: tuple[float, ...]

    @property
    def leave_probability(self) -> float:
        return 1.0 - sum(self.gamma)


class Atom(Frozen):
    regime: Regime
    weight: float


class RegimeLaw(Frozen):
    """Finite-support regime law nu_n; atoms keep their declaration order."""
    atoms: tuple[Atom, ...] = ()

    @classmethod
    def single(cls, regime: Regime) -> "RegimeLaw":
        return cls(atoms=(Atom(regime=regime, weight=1.0),))

    @classmethod
    def of(cls, *pairs: tuple[Regime, float]) -> "RegimeLaw":
        return cls(atoms=tuple(Atom(regime=r, weight=w) for r, w in pairs))

    @property
    def regimes(self) -> tuple[Regime, ...]:
        return tuple(a.regime for a in self.atoms)

    @property
    def weights(self) -> tuple[float, ...]:
        return tuple(a.weight for a in self.atoms)

    @property
    def is_degenerate(self) -> bool:
        return len(self.atoms) == 1


# --- System ----------------------------------------------------------------

class PollingSpec(Frozen):
    """
    Full system description.

    Stations are indexed 0..d. `lam` is read from the key "lambda" in plan
    files. Revolver specs may give a single law (the wheel's law); only
    nu[0] is used for them.
    """
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    d: int = Field(ge=1)
    lam: tuple[float, ...] = Field(alias="lambda")
    nu: tuple[RegimeLaw, ...]
    discipline: Discipline = Discipline.EXHAUSTIVE

    @model_validator(mode="after")
    def check_shape(self):
        if len(self.lam) != self.d + 1:
            raise ValueError(f"lambda needs {self.d + 1} entries, got {len(self.lam)}")
        allowed = {self.d + 1}
        if self.discipline == Discipline.REVOLVER:
            allowed.add(1)
        if len(self.nu) not in allowed:
            raise ValueError(f"nu needs {self.d + 1} regime laws, got {len(self.nu)}")
        return self

    @property
    def stations(self) -> int:
        return self.d + 1

    @property
    def gamma_length(self) -> int:
        return self.d + 1 if self.discipline == Discipline.GATED else self.d

    def law(self, index: int) -> RegimeLaw:
        """Law of the regime with stream index `index` (nu_[index], or the wheel's law)."""
        if self.discipline == Discipline.REVOLVER:
            return self.nu[0]
        return self.nu[index % self.stations]


class ValidatedSpec(Frozen):
    """
    A PollingSpec that passed validate_spec, annotated with its constants.

    eps0 and M0 are the Condition E constants, lam_max / lam_min the extreme
    arrival rates, z_max = M0 + sum(lambda) the largest total jump rate.
    """
    spec: PollingSpec
    eps0: float
    M0: float
    lam_max: float
    lam_min: float
    z_max: float
    deterministic_regimes: bool

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def lam(self) -> tuple[float, ...]:
        return self.spec.lam

    @property
    def discipline(self) -> Discipline:
        return self.spec.discipline

    @property
    def stations(self) -> int:
        return self.spec.stations

    @property
    def dim(self) -> int:
        """Dimension of the per-station matrices."""
        return self.spec.gamma_length

    def law(self, index: int) -> RegimeLaw:
        return self.spec.law(index)

    @property
    def cycle_laws(self) -> tuple[RegimeLaw, ...]:
        """Laws of the d+1 factors of one cycle matrix, station 0 first."""
        return tuple(self.law(n) for n in range(self.stations))


# --- Stochastic model ------------------------------------------------------

class Configuration(Frozen):
    """
    Stochastic-model state: server position plus queue lengths in absolute
    station order. server=None is the idle place (all queues empty).
    `gate` counts the customers still in front of the gate (gated only).
    """
    server: int | None
    queues: tuple[int, ...]
    gate: int | None = None

    @model_validator(mode="after")
    def check_invariants(self):
        if any(q < 0 for q in self.queues):
            raise ValueError("queue lengths must be nonnegative")
        empty = all(q == 0 for q in self.queues)
        if (self.server is None) != empty:
            raise ValueError("server must be idle exactly when every queue is empty")
        if self.server is not None:
            if not 0 <= self.server < len(self.queues):
                raise ValueError(f"server {self.server} is not a station")
            if self.queues[self.server] < 1:
                raise ValueError(f"server sits at empty station {self.server}")
            if self.gate is not None and not 1 <= self.gate <= self.queues[self.server]:
                raise ValueError("gate count must lie in 1..queue length at the server")
        return self

    @classmethod
    def idle(cls, stations: int) -> "Configuration":
        return cls(server=None, queues=(0,) * stations)

    @property
    def is_idle(self) -> bool:
        return self.server is None

    @property
    def total(self) -> int:
        return sum(self.queues)

    def relative(self) -> tuple[int, ...]:
        """Queue vector seen from the server: xi_i = queue at station [N+i]."""
        if self.server is None:
            return self.queues
        n = self.server
        return self.queues[n:] + self.queues[:n]


class StepResult(Frozen):
    """One embedded-chain transition: the new configuration, the event
    category that fired and how many stations the server passed."""
    config: Configuration
    event: str
    hops: int = 0


class SwitchEpoch(Frozen):
    index: int
    station: int
    time: float
    xi: tuple[int, ...]


class RunRecord(Frozen):
    """
    Outcome of one run until the system empties.

    When censored, tau holds the time reached at the event horizon.
    """
    tau: float
    censored: bool
    horizon: int
    event_count: int
    peak_total: int
    switch_epochs: tuple[SwitchEpoch, ...] = ()


class ReplicaResult(Frozen):
    replica: int
    seed: int
    tau: float
    censored: bool
    events: int
    peak_total: int


class TauMoment(Frozen):
    s: float
    mean: float | None
    uncensored: int
    censored_fraction: float
    partial_means: tuple[tuple[int, float], ...]
    growth_exponent: float | None
    diverging: bool


class TauStats(Frozen):
    replicas: int
    censored: int
    all_censored: bool
    moments: tuple[TauMoment, ...]
    samples: tuple[ReplicaResult, ...]


class TailFit(Frozen):
    slope: float
    t_lo: float
    t_hi: float
    r2: float
    lower_slope: float
    upper_slope: float
    power_tail: bool
    samples_used: int


# --- Fluid model -----------------------------------------------------------

class FluidState(Frozen):
    """
    Fluid state at a switch epoch.

    x holds the levels x_0..x_{d-1} seen from the server at station [epoch]
    (d+1 levels for gated). `carry` is the level at the station right behind
    the server; it is zero at every switch epoch and is only nonzero for a
    start taken from an arbitrary configuration.
    """
    epoch: int = 0
    x: tuple[float, ...]
    elapsed: float = 0.0
    carry: float = 0.0

    @model_validator(mode="after")
    def check_levels(self):
        if any(not (v >= 0.0) for v in self.x) or not (self.carry >= 0.0):
            raise ValueError("fluid levels must be nonnegative")
        return self

    @property
    def mass(self) -> float:
        return math.fsum(self.x) + self.carry


class FluidEmptyTime(Frozen):
    D: float | None
    diverged: bool
    epochs: int
    partial_sums: tuple[float, ...] = ()
    tail_estimate: float = 0.0
    tail_error: float = 0.0
    truncated: bool = False


class RatioCheck(Frozen):
    max_ratio: float
    K: float
    ok: bool
    epochs_checked: int
    zero_component_epochs: int


class CouplingReport(Frozen):
    replicas: int
    y0: float
    delta: float
    freq_within: float
    freq_vector_within: float
    fitted_V: float | None
    fitted_V_vector: float | None


class DriftCheck(Frozen):
    drift: float
    target: float
    error_bound: float
    eps_hat: float
    outcomes: int


class SeriesSandwich(Frozen):
    ratios: tuple[float, ...]
    U1: float
    U2: float
    ok: bool


# --- Lyapunov --------------------------------------------------------------

class KEstimate(Frozen):
    s: float
    k_hat: float
    stderr: float
    log_k: float
    log_stderr: float
    n: int
    replicas: int


class TopExponent(Frozen):
    lambda_top: float
    stderr: float
    n: int
    replicas: int


class S0Kind(str, Enum):
    BRACKET = "bracket"
    AT_ZERO = "at_zero"
    LOWER_BOUND = "lower_bound"


class S0Estimate(Frozen):
    """
    Classification threshold s0.

    BRACKET: s0 in [lo, hi]. AT_ZERO: s0 = 0 (positive top exponent).
    LOWER_BOUND: s0 > lo (= s_max); hi is infinite.
    """
    kind: S0Kind
    lo: float
    hi: float
    confident: bool = True
    budget_exhausted: bool = False
    ops_used: int = 0


class LyapunovReport(Frozen):
    s_grid: tuple[float, ...]
    estimates: tuple[KEstimate, ...]
    estimates_2n: tuple[KEstimate, ...] = ()
    length_bias: tuple[bool, ...] = ()
    n: int
    replicas: int
    top_exponent: TopExponent | None = None
    s0: S0Estimate | None = None


class ConvexityCheck(Frozen):
    ok: bool
    worst_violation: float
    worst_at: float | None


class SeriesVerdict(str, Enum):
    BOUNDED = "BOUNDED"
    DIVERGING = "DIVERGING"
    INCONCLUSIVE = "INCONCLUSIVE"


class SeriesTail(Frozen):
    s: float
    log_moments: tuple[float, ...]
    slope: float
    band: float
    verdict: SeriesVerdict

    @property
    def moments(self) -> tuple[float, ...]:
        return tuple(math.exp(v) if v < 709.0 else math.inf for v in self.log_moments)


class SupportScan(Frozen):
    found: bool
    witness: tuple[Regime, ...] | None
    rho: float | None
    checked: int
    total: int
    partial: bool


# --- Experiments -----------------------------------------------------------

class Verdict(str, Enum):
    TRANSIENT = "TRANSIENT"
    RECURRENT = "RECURRENT"
    UNDECIDED = "UNDECIDED"
    SKIPPED = "SKIPPED"
    FAILED = "FAILED"


class ClassificationVerdict(Frozen):
    top_exponent: TopExponent
    s0: S0Estimate
    scan: SupportScan
    verdict: Verdict
    moments: str
    diagnostics: tuple[str, ...] = ()
    k_grid: tuple[KEstimate, ...] = ()


class SweepRow(Frozen):
    theta: float
    top_exponent: float | None
    s0_lo: float | None
    s0_hi: float | None
    verdict: Verdict
    moments: str = ""


class ClassifyParams(Frozen):
    n_top: int = 1000
    replicas_top: int = 30
    n: int = 32
    replicas: int = 10_000
    s_max: float = Field(default_factory=lambda: settings.LYAPUNOV_S_MAX)
    tol: float = 0.02
    confidence: float = Field(default_factory=lambda: settings.CONFIDENCE, gt=0.5, lt=1.0)
    grid_step: float = Field(default_factory=lambda: settings.LYAPUNOV_GRID_STEP, gt=0.0)
    tilt: bool = True


class SweepAxis(Frozen):
    """
    Scalar parameter swept over a grid: `field` of atom `atom` at station
    `station`. field is "mu", "weight" (two-atom laws: the other atom gets
    1 - w) or "gamma<k>".
    """
    station: int = Field(ge=0)
    atom: int = Field(ge=0)
    field: str
    values: tuple[float, ...] = ()
    start: float | None = None
    stop: float | None = None
    step: float | None = None

    @model_validator(mode="after")
    def check_field(self):
        if self.field not in ("mu", "weight") and not (
            self.field.startswith("gamma") and self.field[5:].isdigit()
        ):
            raise ValueError(f"unknown sweep field {self.field!r}")
        ranged = (self.start, self.stop, self.step)
        if self.values and any(v is not None for v in ranged):
            raise ValueError("give either values or start/stop/step, not both")
        if not self.values and any(v is not None for v in ranged):
            if any(v is None for v in ranged) or self.step <= 0:
                raise ValueError("start, stop and a positive step are all required")
        return self

    def grid(self) -> tuple[float, ...]:
        if self.values or self.start is None:
            return self.values
        count = int(round((self.stop - self.start) / self.step)) + 1
        return tuple(round(self.start + i * self.step, 12) for i in range(max(count, 0)))


class SweepParams(Frozen):
    axis: SweepAxis
    classify: ClassifyParams = ClassifyParams(n_top=400, replicas_top=30, n=24, replicas=2000, tol=0.05)


class SimulateParams(Frozen):
    init: tuple[int, ...]
    server: int = 0
    s_list: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    replicas: int = 10_000
    horizon: int = 1_000_000


class CoupleParams(Frozen):
    y0: float = Field(gt=0)
    delta: float = Field(gt=0)
    replicas: int = 1000


class FluidParams(Frozen):
    x: tuple[float, ...]
    carry: float = 0.0
    rel_tol: float = 1e-9
    max_epochs: int = 100_000


class ActionSpec(Frozen):
    name: Literal["classify", "sweep", "simulate", "couple", "fluid"]
    classify: ClassifyParams | None = None
    sweep: SweepParams | None = None
    simulate: SimulateParams | None = None
    couple: CoupleParams | None = None
    fluid: FluidParams | None = None

    @model_validator(mode="before")
    @classmethod
    def fill_defaults(cls, data):
        if isinstance(data, dict) and data.get("name") == "classify" and data.get("classify") is None:
            data = {**data, "classify": {}}
        return data

    @model_validator(mode="after")
    def check_params(self):
        if getattr(self, self.name) is None:
            raise ValueError(f"action {self.name!r} needs a {self.name!r} parameter block")
        return self

    @property
    def params(self):
        return getattr(self, self.name)


class ExperimentPlan(Frozen):
    spec: PollingSpec
    action: ActionSpec
    seed: int
    output_dir: str
    threads: int = 1
    budget: int
