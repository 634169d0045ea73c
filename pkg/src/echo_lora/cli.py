"""Command line: train, eval, ablate, export, merge-check.

Exit status is 0 on success, 1 when a check (merge-check) fails and 2 on
invalid input (bad config, damaged checkpoint, unknown variant).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import TASKS, eval_by_task
from .errors import EchoLoraError, UsageError
from .harness import ablation
from .harness.checkpoint import load_checkpoint, save_checkpoint
from .harness.config import RunConfig, load_config
from .harness.runner import make_datasets, run_training
from .harness.serialize import export_deploy, model_from_checkpoint
from .model import merged_logits
from .perf import tune_allocator

log = logging.getLogger("echo_lora")


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out) if args.out else Path(cfg.output.dir)


def _print_accuracy(accuracy: dict[str, float]) -> None:
    for task, acc in accuracy.items():
        print(f"{task:<18} {100.0 * acc:6.2f}")
    print(f"{'avg':<18} {100.0 * float(np.mean(list(accuracy.values()))):6.2f}")


def cmd_train(args) -> int:
    cfg = _base_config(args)
    if args.variant:
        cfg = ablation.get_variant(args.variant).config(cfg)
    out = _out_dir(args, cfg)
    result = run_training(cfg, out)
    _print_accuracy(result.accuracy)
    print(f"wrote {out / 'final.ckpt'}, {out / 'metrics.csv'}, {out / 'summary.json'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.deploy:
        ckpt = export_deploy(ckpt)
    cfg = RunConfig.from_dict(ckpt.config)
    model = model_from_checkpoint(ckpt, cfg)
    _, held_out = make_datasets(cfg)
    accuracy = eval_by_task(model, held_out)
    _print_accuracy(accuracy)
    if args.out:
        Path(args.out).write_text(json.dumps(accuracy, indent=2) + "\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = _base_config(args)
    out = _out_dir(args, cfg)
    variants = args.variant or list(ablation.VARIANT_IDS)
    for v in variants:
        ablation.get_variant(v)
    rows = ablation.run_ablation(cfg, out, variants)
    tasks = [t for t in TASKS if t in cfg.data.tasks]
    print(ablation.format_table(rows, tasks))
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_export(args) -> int:
    if not args.out:
        raise UsageError("export needs --out for the deploy checkpoint")
    deploy = export_deploy(load_checkpoint(args.checkpoint))
    path = save_checkpoint(deploy, args.out)
    print(f"wrote {path} ({len(deploy.tensors)} tensors, no echo parameters)")
    return 0


def cmd_merge_check(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(ckpt.config)
    model = model_from_checkpoint(ckpt, cfg)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    worst = 0.0
    for _ in range(args.n):
        length = int(rng.integers(2, cfg.backbone.max_seq_len + 1))
        tokens = rng.integers(0, cfg.backbone.vocab_size, length)
        diff = np.abs(merged_logits(model, tokens) - model.echo_off_logits(tokens)).max()
        worst = max(worst, float(diff))
    ok = worst <= args.tol
    print(f"merge-check: {args.n} inputs, max |merged - adapted| = {worst:.3e} "
          f"(tol {args.tol:.0e}) {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echo-lora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat section.key = value config file")
        p.add_argument("--seed", type=int, help="set every seed (init, data, routing, dropout)")
        p.add_argument("--out", help="output directory or file")

    p = sub.add_parser("train", help="train one configuration")
    common(p)
    p.add_argument("--variant", choices=ablation.VARIANT_IDS, help="apply an ablation delta")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-task exact match of a checkpoint (echo off)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--deploy", action="store_true", help="strip echo tensors before loading")
    p.add_argument("--out", help="write the accuracies as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the A-0 ... A-9 grid")
    common(p)
    p.add_argument("--variant", action="append", choices=ablation.VARIANT_IDS,
                   help="restrict to these variants (repeatable)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="write a deploy checkpoint without echo tensors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("merge-check", help="compare merged and adapted forwards")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=100, help="number of random inputs")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_merge_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    try:
        return args.func(args)
    except EchoLoraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
