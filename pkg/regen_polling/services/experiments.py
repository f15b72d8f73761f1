"""
Experiment Pipelines

One function per plan action, each writing its result files into the
plan's output directory and appending a run entry to the manifest:
- run_classify: top exponent, s0 and support scan combined into a verdict
- run_sweep: a cheaper classify per grid point of one swept parameter
- run_simulate: moments of the emptying time tau
- run_couple: fluid against stochastic model on one visit
- run_fluid: fluid emptying time with its per-epoch trace

Every random stream derives from the plan's master seed, so the same plan
and seed reproduce the same CSV bodies.
"""

import logging
from pathlib import Path

from regen_polling.errors import InsufficientTail, PollingError
from regen_polling.models import (
    ClassificationVerdict,
    ClassifyParams,
    Configuration,
    CouplingReport,
    ExperimentPlan,
    FluidEmptyTime,
    FluidState,
    LyapunovReport,
    S0Estimate,
    S0Kind,
    SweepRow,
    TauStats,
    TopExponent,
    ValidatedSpec,
    Verdict,
)
from regen_polling.services.audit import record_run
from regen_polling.services.fluid import (
    check_ratio_bound,
    coupling_experiment,
    fluid_empty_time,
    norm_sandwich_constants,
    write_fluid_trace,
)
from regen_polling.services.lyapunov import (
    build_report,
    check_log_convexity,
    estimate_s0,
    estimate_top_exponent,
    z_value,
)
from regen_polling.services.model_core import scan_transient_support
from regen_polling.services.stochastic import (
    MIN_TAIL_SAMPLES,
    RegimeStream,
    estimate_tau_stats,
    tail_slope,
    write_tau_csv,
)
from regen_polling.templating import render
from regen_polling.utils.concurrency import map_in_threads
from regen_polling.utils.output import write_csv, write_json
from regen_polling.utils.plan import checked_spec, sweep_points
from regen_polling.utils.seeding import derive_rng, derive_seed, value_index

logger = logging.getLogger(__name__)

SWEEP_HEADER = ("theta", "top_exponent", "s0_lo", "s0_hi", "verdict", "moments")

# Ratio-bound check length for fluid runs
RATIO_CHECK_EPOCHS = 1000


# --- Verdicts --------------------------------------------------------------

def _moment_text(s0: S0Estimate) -> str:
    if s0.kind == S0Kind.LOWER_BOUND:
        finite = f"E tau^s finite for s < {s0.lo:.4g}"
        if s0.lo >= 1.0:
            return f"positive recurrent (E tau < inf): {finite}"
        return f"recurrent: {finite}"
    if s0.kind == S0Kind.BRACKET:
        window = f"E tau^s finite for s < {s0.lo:.4g}, infinite for s > {s0.hi:.4g}"
        if s0.hi < 1.0:
            return f"null recurrent: {window}"
        if s0.lo > 1.0:
            return f"positive recurrent (E tau < inf): {window}"
        return f"recurrent, E tau undetermined (s0 bracket contains 1): {window}"
    return "undetermined"


def decide_verdict(top: TopExponent, s0: S0Estimate, confidence: float) -> tuple[Verdict, str, list[str]]:
    """
    Map the evidence to a verdict, a moment annotation and diagnostics.

    The sign of the top exponent's confidence interval decides:
    above 0 TRANSIENT, below 0 RECURRENT, straddling 0 UNDECIDED.
    s0 then labels recurrent systems null (bracket below 1) or positive
    (bracket above 1, or a lower bound of at least 1).
    """
    z = z_value(confidence)
    lo = top.lambda_top - z * top.stderr
    hi = top.lambda_top + z * top.stderr
    diagnostics = []

    if lo > 0.0:
        if s0.kind != S0Kind.AT_ZERO:
            diagnostics.append(f"inconsistent: positive top exponent but s0 is {s0.kind.value}")
        return Verdict.TRANSIENT, "transient: tau is infinite with positive probability", diagnostics

    if hi < 0.0:
        if s0.kind == S0Kind.AT_ZERO:
            diagnostics.append("inconsistent: negative top exponent but s0 = 0")
            return Verdict.RECURRENT, "undetermined", diagnostics
        return Verdict.RECURRENT, _moment_text(s0), diagnostics

    diagnostics.append(f"top exponent interval [{lo:.4g}, {hi:.4g}] contains 0")
    return Verdict.UNDECIDED, "undetermined", diagnostics


def classify_spec(
    spec: ValidatedSpec,
    params: ClassifyParams,
    seed: int,
    budget: int,
    report: LyapunovReport | None = None,
) -> ClassificationVerdict:
    """
    Classify one validated system.

    With a LyapunovReport its top exponent, s0 and k grid are used (and
    its log-convexity checked); otherwise the top exponent and s0 are
    estimated directly, which is what sweeps do.
    """
    if report is not None:
        top, s0 = report.top_exponent, report.s0
    else:
        top = estimate_top_exponent(spec, params.n_top, params.replicas_top, derive_rng(seed, "top-exponent"))
        s0 = estimate_s0(
            spec, params.s_max, params.tol, params.confidence, budget, derive_rng(seed, "s0"),
            top=top, n=params.n, replicas=params.replicas, tilt=params.tilt,
        )
    scan = scan_transient_support(spec, rand=derive_rng(seed, "support-scan"))
    verdict, moments, diagnostics = decide_verdict(top, s0, params.confidence)

    if spec.deterministic_regimes:
        diagnostics.append("every regime law is deterministic: the system is a homogeneous polling model")
    if scan.found and s0.kind == S0Kind.LOWER_BOUND:
        diagnostics.append("inconsistent: the support scan found a transient combination but s0 is only bounded below")
    if scan.partial:
        diagnostics.append(f"support scan is partial: {scan.checked} of {scan.total} combinations checked")
    if s0.budget_exhausted:
        diagnostics.append(f"s0 budget exhausted after {s0.ops_used} products")
    elif not s0.confident:
        diagnostics.append("s0 bracket is not confident at every bisection point")
    if report is not None:
        if len(report.estimates) >= 3:
            convexity = check_log_convexity(report)
            if not convexity.ok:
                diagnostics.append(f"log k is not convex at s = {convexity.worst_at}")
        flagged = [s for s, bias in zip(report.s_grid, report.length_bias) if bias]
        if flagged:
            diagnostics.append(f"k estimates depend on the product length at s = {flagged}")

    for line in diagnostics:
        logger.warning(line)
    logger.info(f"Verdict {verdict.value}: {moments}")
    return ClassificationVerdict(
        top_exponent=top,
        s0=s0,
        scan=scan,
        verdict=verdict,
        moments=moments,
        diagnostics=tuple(diagnostics),
        k_grid=report.estimates if report is not None else (),
    )


# --- Pipelines -------------------------------------------------------------

def run_classify(plan: ExperimentPlan) -> ClassificationVerdict:
    """Classify the plan's system; writes verdict.json, verdict.txt and k_grid.csv."""
    spec = checked_spec(plan.spec)
    params = plan.action.classify
    out = Path(plan.output_dir)

    report = build_report(spec, params, plan.seed, budget=plan.budget)
    result = classify_spec(spec, params, plan.seed, plan.budget, report=report)

    files = [
        write_json(out / "verdict.json", result.model_dump(mode="json"), plan.seed),
        write_csv(
            out / "k_grid.csv",
            ("s", "k_hat", "stderr", "k_hat_2n", "stderr_2n", "length_bias"),
            (
                (repr(one.s), repr(one.k_hat), repr(one.stderr), repr(two.k_hat), repr(two.stderr), int(bias))
                for one, two, bias in zip(report.estimates, report.estimates_2n, report.length_bias)
            ),
            plan.seed,
        ),
    ]
    summary = out / "verdict.txt"
    summary.write_text(render("verdict.txt.j2", result=result, spec=spec, seed=plan.seed), encoding="utf-8")
    files.append(summary)

    record_run(out, "classify", plan.seed, {"verdict": result.verdict.value, **params.model_dump()}, files)
    return result


def _sweep_row(theta: float, spec: ValidatedSpec | None, reason: str | None, plan: ExperimentPlan) -> SweepRow:
    if spec is None:
        logger.warning(f"Sweep point {theta} skipped: {reason}")
        return SweepRow(theta=theta, top_exponent=None, s0_lo=None, s0_hi=None, verdict=Verdict.SKIPPED, moments=reason)

    seed = derive_seed(plan.seed, "sweep", value_index(theta))
    try:
        result = classify_spec(spec, plan.action.sweep.classify, seed, plan.budget)
    except PollingError as e:
        logger.warning(f"Sweep point {theta} failed: {e}")
        return SweepRow(theta=theta, top_exponent=None, s0_lo=None, s0_hi=None, verdict=Verdict.FAILED, moments=str(e))

    logger.debug(f"Sweep point {theta}: {result.verdict.value}, s0 {result.s0.kind.value} [{result.s0.lo}, {result.s0.hi}]")
    return SweepRow(
        theta=theta,
        top_exponent=result.top_exponent.lambda_top,
        s0_lo=result.s0.lo,
        s0_hi=result.s0.hi,
        verdict=result.verdict,
        moments=result.moments,
    )


def run_sweep(plan: ExperimentPlan) -> list[SweepRow]:
    """
    Classify every point of the sweep grid; writes sweep.csv with one row
    per point in grid order.

    Each point's seed is derived from its value, so reordering the grid
    reorders the rows and changes nothing else. Points failing validation
    become SKIPPED rows and points whose classification raises become
    FAILED rows; the sweep always completes.
    """
    params = plan.action.sweep
    out = Path(plan.output_dir)
    points = sweep_points(plan.spec, params.axis)
    logger.info(f"Sweeping {params.axis.field} of station {params.axis.station} atom {params.axis.atom} over {len(points)} points")

    rows = map_in_threads(lambda point: _sweep_row(*point, plan), points, plan.threads)

    def cell(v):
        return "" if v is None else repr(v)

    path = write_csv(
        out / "sweep.csv",
        SWEEP_HEADER,
        ((repr(r.theta), cell(r.top_exponent), cell(r.s0_lo), cell(r.s0_hi), r.verdict.value, r.moments) for r in rows),
        plan.seed,
    )
    record_run(out, "sweep", plan.seed, {"points": len(rows), **params.axis.model_dump()}, [path])
    return rows


def initial_configuration(spec: ValidatedSpec, queues: tuple[int, ...], server: int) -> Configuration:
    if not any(queues):
        return Configuration.idle(spec.stations)
    return Configuration(server=server, queues=tuple(queues))


def run_simulate(plan: ExperimentPlan) -> TauStats:
    """
    Empirical moments of tau; writes tau.csv (per replica),
    tau_moments.csv and, with enough uncensored runs, tail.json.
    """
    spec = checked_spec(plan.spec)
    params = plan.action.simulate
    out = Path(plan.output_dir)
    init = initial_configuration(spec, params.init, params.server)

    result = estimate_tau_stats(
        spec, init, params.s_list, params.replicas, params.horizon, seed=plan.seed, threads=plan.threads,
    )

    def cell(v):
        return "" if v is None else repr(v)

    files = [
        write_tau_csv(out / "tau.csv", result, plan.seed),
        write_csv(
            out / "tau_moments.csv",
            ("s", "mean", "uncensored", "censored_fraction", "growth_exponent", "diverging"),
            (
                (repr(m.s), cell(m.mean), m.uncensored, repr(m.censored_fraction), cell(m.growth_exponent), int(m.diverging))
                for m in result.moments
            ),
            plan.seed,
        ),
    ]

    taus = [r.tau for r in result.samples if not r.censored]
    if len(taus) >= MIN_TAIL_SAMPLES:
        try:
            fit = tail_slope(taus)
            files.append(write_json(out / "tail.json", fit.model_dump(), plan.seed))
        except InsufficientTail as e:
            logger.warning(f"No tail fit: {e}")
    else:
        logger.info(f"Tail fit skipped: {len(taus)} uncensored runs (< {MIN_TAIL_SAMPLES})")

    record_run(out, "simulate", plan.seed, {"censored": result.censored, **params.model_dump()}, files)
    return result


def run_couple(plan: ExperimentPlan) -> CouplingReport:
    """Fluid against stochastic model on one visit; writes coupling.json."""
    spec = checked_spec(plan.spec)
    params = plan.action.couple
    out = Path(plan.output_dir)

    report = coupling_experiment(spec, params.y0, params.delta, params.replicas, seed=plan.seed, threads=plan.threads)
    path = write_json(out / "coupling.json", report.model_dump(), plan.seed)
    record_run(out, "couple", plan.seed, params.model_dump(), [path])
    return report


def run_fluid(plan: ExperimentPlan) -> FluidEmptyTime:
    """
    Fluid emptying time from the plan's levels; writes fluid_trace.csv and
    fluid.json (D or DIVERGED, the norm constants and the ratio check).
    """
    spec = checked_spec(plan.spec)
    params = plan.action.fluid
    out = Path(plan.output_dir)
    init = FluidState(epoch=0, x=params.x, carry=params.carry)
    stream = RegimeStream(spec, derive_seed(plan.seed, "fluid"))

    trace: list = []
    result = fluid_empty_time(spec, init, stream, rel_tol=params.rel_tol, max_epochs=params.max_epochs, trace=trace)
    if result.diverged:
        logger.warning(f"Fluid system diverged after {result.epochs} epochs")
    else:
        logger.info(f"Fluid emptying time D = {result.D:.10g} after {result.epochs} epochs")

    c1, c2 = norm_sandwich_constants(spec)
    summary = {
        "status": "DIVERGED" if result.diverged else "EMPTIED",
        "D": result.D,
        "epochs": result.epochs,
        "tail_estimate": result.tail_estimate,
        "tail_error": result.tail_error,
        "C1": c1,
        "C2": c2,
    }
    if all(v > 0.0 for v in params.x):
        epochs = min(RATIO_CHECK_EPOCHS, max(result.epochs, spec.stations + 1))
        summary["ratio_check"] = check_ratio_bound(spec, init, stream, epochs).model_dump()

    files = [
        write_fluid_trace(out / "fluid_trace.csv", spec, trace, plan.seed),
        write_json(out / "fluid.json", summary, plan.seed),
    ]
    record_run(out, "fluid", plan.seed, params.model_dump(), files)
    return result


PIPELINES = {
    "classify": run_classify,
    "sweep": run_sweep,
    "simulate": run_simulate,
    "couple": run_couple,
    "fluid": run_fluid,
}


def run_plan(plan: ExperimentPlan):
    """Dispatch the plan to the pipeline of its action."""
    logger.info(f"Running {plan.action.name} (seed {plan.seed}) into {plan.output_dir}")
    return PIPELINES[plan.action.name](plan)
