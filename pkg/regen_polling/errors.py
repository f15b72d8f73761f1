"""
Exception Hierarchy

Every error raised on purpose by the package derives from PollingError so
the command line entry point can map failures to exit codes in one place.

Statistical non-successes (censored runs, a diverging fluid system, an
exhausted bisection budget) are NOT exceptions: they are encoded in the
result objects and logged.
"""


class PollingError(Exception):
    """Base class for all package errors."""


# --- Spec validation -------------------------------------------------------

class SpecViolation(PollingError):
    """
    One problem found while validating a PollingSpec.

    Args:
        station: Station index the problem belongs to (None for spec-wide problems)
        atom: Atom index inside the station's regime law (None if not atom-specific)
        message: Human-readable description
    """

    def __init__(self, message: str, station: int | None = None, atom: int | None = None):
        self.station = station
        self.atom = atom
        location = ""
        if station is not None:
            location = f"station {station}"
            if atom is not None:
                location += f", atom {atom}"
            location += ": "
        super().__init__(f"{location}{message}")


class ConditionEViolation(SpecViolation):
    """An atom breaks the uniform ellipticity condition (mu too small)."""


class EmptyLaw(SpecViolation):
    """A station's regime law has no atoms."""


class BadWeights(SpecViolation):
    """Atom weights are not strictly positive or do not sum to one."""


class GammaOutOfRange(SpecViolation):
    """Feedback probabilities are negative, sum above one, or have the wrong length."""


class SpecValidationError(PollingError):
    """
    Raised by validate_spec with every violation found, not just the first.
    """

    def __init__(self, violations: list[SpecViolation]):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"{len(self.violations)} spec violation(s): {lines}")


# --- Numerics --------------------------------------------------------------

class DivisionByNonpositive(PollingError):
    """A matrix denominator (mu - lambda_n, or mu for gated) is not positive."""


class NoConvergence(PollingError):
    """Power iteration hit its iteration cap; best_estimate holds the last value."""

    def __init__(self, message: str, best_estimate: float):
        self.best_estimate = best_estimate
        super().__init__(f"{message} (best estimate {best_estimate!r})")


class SupportTooLarge(PollingError):
    """Support enumeration would exceed the cap and a strict scan was requested."""


class DegenerateNorm(PollingError):
    """A renormalised matrix product collapsed to the zero matrix."""


# --- Simulation ------------------------------------------------------------

class InvalidState(PollingError):
    """A configuration breaks the server/queue invariants."""


class NonpositiveDrain(PollingError):
    """The fluid drain speed at the current station is not positive."""


class DivergedFluid(PollingError):
    """A fluid emptying time needed for a drift evaluation diverged."""


class InsufficientTail(PollingError):
    """Too few uncensored samples to fit a tail slope."""


class UnsupportedDiscipline(PollingError):
    """The operation is not defined for the spec's service discipline."""


# --- Plan files ------------------------------------------------------------

class PlanError(PollingError):
    """Base class for plan-file problems."""


class PlanParseError(PlanError):
    """The plan file is not well-formed YAML."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class PlanValidationError(PlanError):
    """The plan parses but a field is missing, unknown or invalid."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        prefix = f"{field}: " if field else ""
        super().__init__(f"{prefix}{message}")
