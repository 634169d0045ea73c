"""Train plain LoRA and Echo-LoRA side by side on a reduced toy mixture.

By default only copy and reverse are trained, with a higher learning rate,
so both runs finish in about two minutes. Pass --full for the default
four-task configuration (several minutes per run).

    python demos/03_train_compare.py [--full] [--seed 0]
"""

import argparse
import dataclasses
import time

from echo_lora.harness import RunConfig, run_training
from echo_lora.perf import tune_allocator

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()
tune_allocator()

cfg = RunConfig().with_seed(args.seed)
if not args.full:
    cfg = cfg.replace(data=dataclasses.replace(cfg.data, tasks=["copy", "reverse"],
                                               n_train_per_task=2000, n_eval_per_task=100),
                      objective=dataclasses.replace(cfg.objective, lr=3e-4))

results = {}
for name, echo_on in (("lora", False), ("echo-lora", True)):
    run_cfg = cfg.replace(echo=dataclasses.replace(cfg.echo, enabled=echo_on))
    t0 = time.time()
    results[name] = run_training(run_cfg)
    print(f"{name:<10} trained {results[name].steps} steps in {time.time() - t0:.0f}s")

tasks = list(results["lora"].accuracy)
print("\n" + " " * 10 + "".join(f"{t:>18}" for t in tasks) + f"{'avg':>8}")
for name, res in results.items():
    cells = "".join(f"{100 * res.accuracy[t]:18.1f}" for t in tasks)
    print(f"{name:<10}{cells}{100 * res.mean_accuracy:8.1f}")

echo_hist = [h for h in results["echo-lora"].history if h.r_k == 1]
print(f"\necho pass ran on {len(echo_hist)} of {results['echo-lora'].steps} steps; "
      f"final gate mean {echo_hist[-1].gate_mean:.3f}, final L_kd {echo_hist[-1].l_kd:.2e}")
