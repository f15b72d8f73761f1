"""
Plan File Loader

Plans are YAML documents with these top-level keys:

    system:                      # required
      d: 1
      lambda: [1.0, 1.0]
      discipline: exhaustive     # exhaustive | revolver | gated
    station 0:                   # one key per station, 0..d (revolver: station 0 only)
      - [0.5, 3.0, 0.0]          # one atom: [weight, mu, gamma...]
      - [0.5, 1.25, 0.0]
    station 1:
      - [1.0, 3.0, 0.0]
    action:                      # required: name plus the action's parameters
      name: classify
      n: 32
    seed: 12345                  # optional; --seed overrides it
    output_dir: results/null     # optional; --out overrides it
    threads: 1                   # optional; --threads overrides it
    budget: 2000000000           # optional; --budget overrides it

Unknown keys anywhere are rejected. Parameter blocks per action:
- classify: ClassifyParams fields (all optional)
- sweep: axis {station, atom, field, values | start/stop/step}, classify {...}
- simulate: init, server, s_list, replicas, horizon
- couple: y0, delta, replicas
- fluid: x, carry, rel_tol, max_epochs
"""

import logging
import re
from pathlib import Path

import yaml
from pydantic import ValidationError

from regen_polling.config import settings
from regen_polling.errors import PlanParseError, PlanValidationError, SpecValidationError
from regen_polling.models import (
    ActionSpec,
    Discipline,
    ExperimentPlan,
    PollingSpec,
    Regime,
    RegimeLaw,
    SweepAxis,
    ValidatedSpec,
)
from regen_polling.services.model_core import validate_spec

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = {"system", "action", "seed", "output_dir", "threads", "budget"}
SYSTEM_KEYS = {"d", "lambda", "discipline"}
STATION_KEY = re.compile(r"^station (\d+)$")


def _field_path(error: ValidationError, prefix: str) -> str:
    first = error.errors()[0]
    return ".".join([prefix] + [str(part) for part in first["loc"]])


def _parse_law(key: str, entries) -> RegimeLaw:
    if not isinstance(entries, list) or not entries:
        raise PlanValidationError("expected a non-empty list of [weight, mu, gamma...] atoms", field=key)
    atoms = []
    for j, entry in enumerate(entries):
        field = f"{key}.atom {j}"
        if not isinstance(entry, list) or len(entry) < 2:
            raise PlanValidationError("an atom is [weight, mu, gamma...]", field=field)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in entry):
            raise PlanValidationError(f"atom entries must be numbers, got {entry}", field=field)
        weight, mu, *gamma = (float(v) for v in entry)
        atoms.append((Regime(mu=mu, gamma=tuple(gamma)), weight))
    return RegimeLaw.of(*atoms)


def parse_spec(data: dict) -> PollingSpec:
    """Build the PollingSpec from the `system` and `station <n>` sections."""
    system = data.get("system")
    if not isinstance(system, dict):
        raise PlanValidationError("missing or malformed section", field="system")
    unknown = set(system) - SYSTEM_KEYS
    if unknown:
        raise PlanValidationError(f"unknown keys {sorted(unknown)}", field="system")
    for key in ("d", "lambda"):
        if key not in system:
            raise PlanValidationError("required", field=f"system.{key}")

    d = system["d"]
    if not isinstance(d, int) or d < 1:
        raise PlanValidationError(f"d must be a positive integer, got {d!r}", field="system.d")
    try:
        discipline = Discipline(system.get("discipline", Discipline.EXHAUSTIVE.value))
    except ValueError:
        raise PlanValidationError(f"unknown discipline {system.get('discipline')!r}", field="system.discipline")

    # Collect every "station <n>" key; which ones are required depends on the discipline
    laws: dict[int, RegimeLaw] = {}
    for key, entries in data.items():
        match = STATION_KEY.match(str(key))
        if match:
            laws[int(match.group(1))] = _parse_law(key, entries)

    expected = [0] if discipline == Discipline.REVOLVER else list(range(d + 1))
    for n in expected:
        if n not in laws:
            raise PlanValidationError("missing regime law", field=f"station {n}")
    extra = sorted(set(laws) - set(range(d + 1)))
    if extra:
        raise PlanValidationError(f"no such station (d={d})", field=f"station {extra[0]}")

    # The revolver may list just station 0: its law is used for the whole wheel
    stations = sorted(laws) if discipline == Discipline.REVOLVER else expected
    try:
        return PollingSpec(
            d=d,
            lam=tuple(system["lambda"]),
            nu=tuple(laws[n] for n in stations),
            discipline=discipline,
        )
    except (ValidationError, TypeError) as e:
        message = e.errors()[0]["msg"] if isinstance(e, ValidationError) else str(e)
        raise PlanValidationError(message, field="system")


def checked_spec(spec: PollingSpec) -> ValidatedSpec:
    """validate_spec, reported as a plan error naming the first offending station."""
    try:
        return validate_spec(spec)
    except SpecValidationError as e:
        first = e.violations[0]
        field = f"station {first.station}" if first.station is not None else "system"
        raise PlanValidationError(str(e), field=field) from e


def apply_axis(spec: PollingSpec, axis: SweepAxis, value: float) -> PollingSpec:
    """
    Copy of `spec` with the swept parameter set to `value`.

    A weight sweep needs a two-atom law: the other atom gets 1 - value.
    """
    if axis.station >= len(spec.nu):
        raise PlanValidationError(f"no regime law for station {axis.station}", field="action.axis.station")
    law = spec.nu[axis.station]
    if axis.atom >= len(law.atoms):
        raise PlanValidationError(f"station {axis.station} has {len(law.atoms)} atoms", field="action.axis.atom")

    atoms = list(law.atoms)
    atom = atoms[axis.atom]
    # Models are frozen: rebuild the atom, then the law, then the spec
    if axis.field == "mu":
        atoms[axis.atom] = atom.model_copy(update={"regime": atom.regime.model_copy(update={"mu": value})})
    elif axis.field == "weight":
        if len(atoms) != 2:
            raise PlanValidationError("weight sweeps need a two-atom law", field="action.axis.field")
        other = 1 - axis.atom
        atoms[axis.atom] = atom.model_copy(update={"weight": value})
        atoms[other] = atoms[other].model_copy(update={"weight": 1.0 - value})
    else:
        # "gamma<k>"
        k = int(axis.field[5:])
        gamma = list(atom.regime.gamma)
        if k >= len(gamma):
            raise PlanValidationError(f"gamma has {len(gamma)} entries", field="action.axis.field")
        gamma[k] = value
        atoms[axis.atom] = atom.model_copy(update={"regime": atom.regime.model_copy(update={"gamma": tuple(gamma)})})

    nu = list(spec.nu)
    nu[axis.station] = RegimeLaw(atoms=tuple(atoms))
    return spec.model_copy(update={"nu": tuple(nu)})


def sweep_points(spec: PollingSpec, axis: SweepAxis) -> list[tuple[float, ValidatedSpec | None, str | None]]:
    """
    Resolve every grid value to a validated spec, or to the reason it is
    skipped (a spec failing validation).
    """
    points = []
    for value in axis.grid():
        try:
            points.append((value, validate_spec(apply_axis(spec, axis, value)), None))
        except SpecValidationError as e:
            points.append((value, None, str(e)))
    return points


def _parse_action(data: dict) -> ActionSpec:
    block = data.get("action")
    if not isinstance(block, dict) or "name" not in block:
        raise PlanValidationError("missing or malformed section (needs a name)", field="action")
    name = block["name"]
    params = {k: v for k, v in block.items() if k != "name"}
    # The flat YAML block becomes {name, <name>: params} for ActionSpec
    try:
        return ActionSpec.model_validate({"name": name, name: params} if isinstance(name, str) else {"name": name})
    except ValidationError as e:
        first = e.errors()[0]
        raise PlanValidationError(first["msg"], field=_field_path(e, "action"))


def _check_action(spec: ValidatedSpec, action: ActionSpec):
    if action.name == "simulate":
        params = action.simulate
        if len(params.init) != spec.stations:
            raise PlanValidationError(f"init needs {spec.stations} queue lengths", field="action.init")
        if any(q < 0 for q in params.init):
            raise PlanValidationError("queue lengths must be >= 0", field="action.init")
        if any(params.init) and not (0 <= params.server < spec.stations and params.init[params.server] > 0):
            raise PlanValidationError("the server must start at a nonempty station", field="action.server")
        if any(s < 0 for s in params.s_list):
            raise PlanValidationError("moments need s >= 0", field="action.s_list")
    elif action.name == "fluid":
        params = action.fluid
        if len(params.x) != spec.dim:
            raise PlanValidationError(f"x needs {spec.dim} levels", field="action.x")
        if any(v < 0 for v in params.x) or params.carry < 0:
            raise PlanValidationError("fluid levels must be >= 0", field="action.x")
        if spec.discipline == Discipline.GATED and params.carry:
            raise PlanValidationError("gated fluid states keep every level in x", field="action.carry")
        if not 0 < params.rel_tol < 1:
            raise PlanValidationError("rel_tol must lie in (0, 1)", field="action.rel_tol")


def load_plan(
    path: str | Path,
    seed: int | None = None,
    output_dir: str | None = None,
    threads: int | None = None,
    budget: int | None = None,
) -> ExperimentPlan:
    """
    Read, validate and resolve a plan file.

    Keyword arguments (the CLI flags) override plan values, which override
    the settings defaults. The resolved plan is logged.

    Raises:
        PlanParseError: unreadable file or malformed YAML (with line/column)
        PlanValidationError: unknown, missing or invalid field; spec
            violations are reported against the offending station
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise PlanParseError(f"cannot read {path}: {e.strerror}")

    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        raise PlanParseError(
            f"{path}: {e.problem}",
            line=mark.line + 1 if mark else None,
            column=mark.column + 1 if mark else None,
        )
    except yaml.YAMLError as e:
        raise PlanParseError(f"{path}: {e}")

    # An empty file loads as None
    if not isinstance(data, dict):
        raise PlanParseError(f"{path}: a plan is a mapping of sections")
    unknown = [k for k in data if k not in TOP_LEVEL_KEYS and not STATION_KEY.match(str(k))]
    if unknown:
        raise PlanValidationError("unknown section", field=str(unknown[0]))

    spec = parse_spec(data)
    validated = checked_spec(spec)
    # Action checks that need the system (queue count, fluid dimension) run after validation
    action = _parse_action(data)
    _check_action(validated, action)

    # Precedence: CLI flag, then plan file, then settings (env / .env / defaults)
    try:
        plan = ExperimentPlan(
            spec=spec,
            action=action,
            seed=seed if seed is not None else data.get("seed", settings.MASTER_SEED),
            output_dir=output_dir or data.get("output_dir") or settings.OUTPUT_DIR,
            threads=threads if threads is not None else data.get("threads", settings.THREADS),
            budget=budget if budget is not None else data.get("budget", settings.BUDGET_OPS),
        )
    except ValidationError as e:
        raise PlanValidationError(e.errors()[0]["msg"], field=_field_path(e, "plan"))

    logger.info(f"Loaded plan {path}: action={action.name}, seed={plan.seed}, output={plan.output_dir}")
    logger.info(f"Resolved {action.name} parameters: {action.params.model_dump()}")
    # Resolve the grid once here so skipped points show up before any work starts
    if action.name == "sweep":
        points = sweep_points(spec, action.sweep.axis)
        skipped = [value for value, point, _ in points if point is None]
        logger.info(f"Sweep grid has {len(points)} points")
        if skipped:
            logger.warning(f"Sweep points failing validation will be skipped: {skipped}")
    return plan
