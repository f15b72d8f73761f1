"""
Result File Writers

Every result file starts with the master seed of the run:
- CSV files get a leading "# master_seed=<seed>" comment line, then the header
- JSON files carry a "master_seed" key

Floats are written with repr(), so identical runs give byte-identical files.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence], seed: int) -> Path:
    """
    Write a CSV file headed by the master seed comment.

    Args:
        path: Target file; parent directories are created
        header: Column names
        rows: Row sequences, same length as header
        seed: Master seed recorded in the first line

    Returns:
        The path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        handle.write(f"# master_seed={seed}\n")
        # Always \n line endings
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        count = 0
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
            count += 1
    logger.info(f"Wrote {count} rows to {path}")
    return path


def write_json(path: str | Path, payload: dict, seed: int) -> Path:
    """Write a JSON summary with the master seed as its first key."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # dicts keep insertion order, so master_seed is written first
    document = {"master_seed": seed, **payload}
    path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {path}")
    return path


def read_csv_body(path: str | Path) -> list[list[str]]:
    """Rows of a CSV written by write_csv, header included, seed line skipped."""
    with Path(path).open(newline="", encoding="utf-8") as handle:
        lines = [line for line in handle if not line.startswith("#")]
    return list(csv.reader(lines))
