"""Per-step CSV metrics and a JSON run summary."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from ..objective import StepResult

COLUMNS = ("step", "p_k", "r_k", "L_off", "L_on", "L_kd", "L_total", "grad_norm", "gate_mean")


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    return str(x)


def step_row(r: StepResult) -> list[str]:
    """Echo-only columns stay empty on steps where the echo pass was skipped."""
    return [_cell(v) for v in (r.step, r.p_k, r.r_k, r.l_off, r.l_on, r.l_kd, r.l_total,
                               r.grad_norm, r.gate_mean)]


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", newline="")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(COLUMNS)

    def write(self, r: StepResult) -> None:
        self._csv.writerow(step_row(r))

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary(path, summary: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return path
