"""
Summarize training metric logs written by `pyfu train`.

Input: one or more JSON-lines logs, one record per optimizer step. The
script logs, per run, the loss at the start and the end, the best and the
last evaluation, and the step at which the best mIoU was reached.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
from pathlib import Path
from typing import Any

LOGGER = logging.getLogger(__name__)


def _read_log(path: Path) -> list[dict[str, Any]]:
    """Parse one JSON-lines metrics log."""
    records = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exception:
            msg = f"{path}:{number} is not valid JSON: {exception}"
            raise SystemExit(msg) from exception
    return records


def summarize(records: list[dict[str, Any]]) -> dict[str, Any]:
    """Reduce a run's records to its headline numbers."""
    if not records:
        return {"steps": 0}
    evaluations = [record for record in records if record.get("miou") is not None]
    summary: dict[str, Any] = {
        "steps": records[-1]["step"],
        "first_loss": records[0]["loss"],
        "last_loss": records[-1]["loss"],
    }
    if evaluations:
        best = max(evaluations, key=lambda record: record["miou"])
        summary.update(
            {
                "best_miou": best["miou"],
                "best_step": best["step"],
                "last_miou": evaluations[-1]["miou"],
                "last_accuracy": evaluations[-1]["accuracy"],
            }
        )
    return summary


def _percent(value: float | None) -> str:
    return "n/a" if value is None or math.isnan(value) else f"{100 * value:.1f}"


def _build_summary(runs: dict[str, dict[str, Any]]) -> str:
    """Build a text summary line per run."""
    lines = ["Training runs:"]
    for name, summary in runs.items():
        if not summary["steps"]:
            lines.append(f"- {name}: empty log")
            continue
        line = (
            f"- {name}: {summary['steps']} steps, loss {summary['first_loss']:.4f} -> {summary['last_loss']:.4f}"
        )
        if "best_miou" in summary:
            line += (
                f", best mIoU {_percent(summary['best_miou'])} at step {summary['best_step']}"
                f", last mIoU {_percent(summary['last_miou'])}"
                f", last accuracy {_percent(summary['last_accuracy'])}"
            )
        lines.append(line)
    return "\n".join(lines)


def main() -> None:
    """Read every log and print the summary."""
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("logs", type=Path, nargs="+", help="JSON-lines metrics logs")
    args = parser.parse_args()

    runs = {path.stem: summarize(_read_log(path)) for path in args.logs}
    LOGGER.info(_build_summary(runs))


if __name__ == "__main__":
    main()
