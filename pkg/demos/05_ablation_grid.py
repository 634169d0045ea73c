"""Run the A-0 ... A-9 grid at a tiny scale and print the table.

The numbers mean little at this size; the point is the table layout and that
every variant trains without numerical trouble. `echo-lora ablate` runs the
same grid from a config file.

    python demos/05_ablation_grid.py
"""

import dataclasses

from echo_lora.data import TASKS
from echo_lora.harness import RunConfig, run_ablation
from echo_lora.harness.ablation import VARIANTS, format_table
from echo_lora.perf import tune_allocator

tune_allocator()
cfg = RunConfig()
cfg = cfg.replace(data=dataclasses.replace(cfg.data, n_train_per_task=32, n_eval_per_task=16),
                  train=dataclasses.replace(cfg.train, epochs=1))

for spec in VARIANTS:
    print(f"{spec.variant}  (per-task id {spec.appendix_id})  {spec.label}")
rows = run_ablation(cfg)
print()
print(format_table(rows, list(TASKS)))
