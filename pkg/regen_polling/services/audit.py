"""
Run Manifest Service

This module records one audit entry per finished pipeline run.

Entries are appended as JSON lines to manifest.jsonl in the output
directory, so a results directory carries the history of every experiment
that wrote into it:
- the action and the master seed
- the resolved action parameters
- the files written
"""

import json
import logging
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


def record_run(
    output_dir: str | Path,
    action: str,
    seed: int,
    details: dict | str | None = None,
    files: list[Path] | None = None,
) -> Path:
    """
    Append one run to the output directory's manifest.

    Only call this after the pipeline's files are written, so the manifest
    never lists a run whose outputs are missing.

    Args:
        output_dir: Directory holding the run's outputs
        action: Pipeline name (e.g. "classify", "sweep")
        seed: Master seed of the run
        details: Optional context about the run
                 - Dict: stored as a nested JSON object
                 - String: stored as-is
                 - None: no details
        files: Paths written by the run, stored relative to output_dir

    Example:
        record_run("results", "classify", 42, {"n": 32}, [Path("results/verdict.json")])
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    entry = {
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "action": action,
        "master_seed": seed,
        "details": details,
        # Names are relative to the results directory
        "files": [Path(f).name if Path(f).parent == output_dir else str(f) for f in files or []],
    }
    path = output_dir / MANIFEST_NAME
    # Append only
    with path.open("a", encoding="utf-8") as handle:
        handle.write(json.dumps(entry, default=str) + "\n")
    logger.debug(f"Recorded {action} run in {path}")
    return path
