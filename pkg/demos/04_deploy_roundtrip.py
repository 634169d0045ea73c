"""Train briefly, then check that deployment drops the echo path for free.

The echo tensors are only training scaffolding. After stripping them the
checkpoint loads as a plain adapter model, and merging the adapters into the
frozen weights reproduces the adapted forward.

    python demos/04_deploy_roundtrip.py
"""

import dataclasses
import tempfile
from pathlib import Path

import numpy as np

from echo_lora.harness import (RunConfig, export_deploy, load_checkpoint, model_from_checkpoint,
                               run_training, save_checkpoint)
from echo_lora.model import merged_logits
from echo_lora.perf import tune_allocator

tune_allocator()
cfg = RunConfig()
cfg = cfg.replace(data=dataclasses.replace(cfg.data, n_train_per_task=64, n_eval_per_task=16),
                  train=dataclasses.replace(cfg.train, epochs=1))

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp)
    run_training(cfg, out)
    full = load_checkpoint(out / "final.ckpt")
    deploy = export_deploy(full)
    save_checkpoint(deploy, out / "deploy.ckpt")
    n_echo = len(full.names("echo."))
    print(f"training checkpoint: {len(full.tensors)} tensors ({n_echo} echo)")
    print(f"deploy checkpoint:   {len(deploy.tensors)} tensors, "
          f"{(out / 'deploy.ckpt').stat().st_size / (out / 'final.ckpt').stat().st_size:.0%} of the size")

    trained = model_from_checkpoint(full)
    shipped = model_from_checkpoint(load_checkpoint(out / "deploy.ckpt"))
    rng = np.random.default_rng(0)
    worst_strip, worst_merge = 0.0, 0.0
    for _ in range(20):
        tokens = rng.integers(0, cfg.backbone.vocab_size, int(rng.integers(4, 13)))
        a, b = trained.echo_off_logits(tokens), shipped.echo_off_logits(tokens)
        worst_strip = max(worst_strip, float(np.abs(a - b).max()))
        worst_merge = max(worst_merge, float(np.abs(merged_logits(shipped, tokens) - b).max()))
    print(f"stripped vs trained logits, max diff: {worst_strip}")
    print(f"merged weights vs adapters, max diff: {worst_merge:.1e}")
