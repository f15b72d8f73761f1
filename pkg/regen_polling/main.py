"""
Command Line Entry Point

This module wires the plan loader to the experiment pipelines:
- Logging setup from the settings
- Plan loading with the CLI overrides (--seed, --out, --threads, --budget)
- Dispatch to the pipeline named by the plan's action
- Exit codes: 0 on success, 2 for plan/spec problems, 1 for any other failure

Usage:
    python -m regen_polling.main --plan plans/null_recurrent.yaml --out results/null
"""

import logging
import sys

import click

from regen_polling.config import settings
from regen_polling.errors import PlanError, PollingError, SpecValidationError
from regen_polling.services.experiments import run_plan
from regen_polling.utils.plan import load_plan

logger = logging.getLogger(__name__)

EXIT_INVALID = 2
EXIT_FAILED = 1


@click.command()
@click.option("--plan", "plan_path", required=True, type=click.Path(dir_okay=False), help="Plan file (YAML).")
@click.option("--seed", type=click.IntRange(min=0, max=2**64 - 1), default=None, help="Master seed; overrides the plan.")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker threads for replicas and sweep points.")
@click.option("--budget", type=click.IntRange(min=1), default=None, help="s0 bisection budget in matrix products.")
def cli(plan_path, seed, output_dir, threads, budget):
    """Run one polling-system experiment described by a plan file."""
    # Configure logging once, before any module logs
    logging.basicConfig(
        level=settings.effective_log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        plan = load_plan(plan_path, seed=seed, output_dir=output_dir, threads=threads, budget=budget)
        result = run_plan(plan)
    # Invalid plan or system: exit 2
    except (PlanError, SpecValidationError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_INVALID)
    # Other package errors: exit 1
    except PollingError as e:
        logger.exception("Experiment failed")
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_FAILED)

    # Only classify results carry a verdict
    verdict = getattr(result, "verdict", None)
    if verdict is not None:
        click.echo(f"{verdict.value}: {result.moments}")
    click.echo(f"results written to {plan.output_dir}")


if __name__ == "__main__":
    cli()
