"""The A-0 ... A-9 ablation grid as config deltas over a base run.

Ids follow the summary ordering of the ten settings. The per-task breakdown
numbers the same settings differently; ``appendix_id`` records that second id
so results can be matched across both tables.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..data import TASKS
from .config import RunConfig
from .runner import RunResult, run_training

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationSpec:
    variant: str
    appendix_id: str
    label: str
    apply: Callable[[RunConfig], RunConfig]

    def config(self, base: RunConfig) -> RunConfig:
        return self.apply(base).validate()


def _echo(cfg: RunConfig, **changes) -> RunConfig:
    return cfg.replace(echo=dataclasses.replace(cfg.echo, enabled=True, **changes))


def _no_routing(cfg: RunConfig) -> RunConfig:
    cfg = _echo(cfg)
    return cfg.replace(routing=dataclasses.replace(cfg.routing, p_start=1.0, p_end=1.0))


def _deep_to_deep(cfg: RunConfig) -> RunConfig:
    return _echo(cfg, source_layers=[-2, -1], target_layers=[-4, -3])


def _shallow_to_shallow(cfg: RunConfig) -> RunConfig:
    base = RunConfig().echo
    targets = list(base.target_layers)
    shift = len(targets)
    return _echo(cfg, source_layers=[t + shift for t in targets], target_layers=targets)


VARIANTS: tuple[AblationSpec, ...] = (
    AblationSpec("A-0", "A-0", "Reproduced LoRA baseline",
                 lambda c: c.replace(echo=dataclasses.replace(c.echo, enabled=False))),
    AblationSpec("A-1", "A-3", "w/o Stochastic Routing", _no_routing),
    AblationSpec("A-2", "A-4", "Deep -> Deep", _deep_to_deep),
    AblationSpec("A-3", "A-5", "Shallow -> Shallow", _shallow_to_shallow),
    AblationSpec("A-4", "A-2", "w/o Answer-Only Masking",
                 lambda c: _echo(c, answer_only=False)),
    AblationSpec("A-5", "A-7", "v_proj only", lambda c: _echo(c, target_projections=["v"])),
    AblationSpec("A-6", "A-9", "w/o Answer-Only Masking + all attention projections",
                 lambda c: _echo(c, answer_only=False, target_projections=["q", "k", "v", "o"])),
    AblationSpec("A-7", "A-6", "q_proj only", lambda c: _echo(c, target_projections=["q"])),
    AblationSpec("A-8", "A-8", "All attention projections",
                 lambda c: _echo(c, target_projections=["q", "k", "v", "o"])),
    AblationSpec("A-9", "A-1", "Full Echo-LoRA", _echo),
)

VARIANT_IDS = tuple(v.variant for v in VARIANTS)


def get_variant(variant: str) -> AblationSpec:
    for v in VARIANTS:
        if v.variant == variant:
            return v
    raise KeyError(f"unknown variant {variant!r}; choose from {', '.join(VARIANT_IDS)}")


def table_columns(tasks) -> list[str]:
    return ["variant", "appendix_id", "setting", *tasks, "avg"]


def result_row(spec: AblationSpec, result: RunResult, tasks) -> dict:
    row = {"variant": spec.variant, "appendix_id": spec.appendix_id, "setting": spec.label}
    for t in tasks:
        row[t] = round(100.0 * result.accuracy.get(t, float("nan")), 2)
    row["avg"] = round(100.0 * float(np.mean([result.accuracy[t] for t in tasks])), 2)
    return row


def run_ablation(base: RunConfig, out_dir=None, variants=VARIANT_IDS) -> list[dict]:
    """Each variant is a fresh run from the same seeds; nothing is shared between them."""
    tasks = [t for t in TASKS if t in base.data.tasks]
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for vid in variants:
        spec = get_variant(vid)
        cfg = spec.config(base)
        run_dir = out / vid if out is not None else None
        result = run_training(cfg, run_dir)
        rows.append(result_row(spec, result, tasks))
        log.info("%s %s: avg %.2f", vid, spec.label, rows[-1]["avg"])
    if out is not None:
        write_table(out / "ablation.csv", rows, tasks)
    return rows


def write_table(path, rows: list[dict], tasks) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=table_columns(tasks))
        w.writeheader()
        w.writerows(rows)
    return path


def format_table(rows: list[dict], tasks) -> str:
    cols = table_columns(tasks)
    cells = [cols] + [[str(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)
