"""End-to-end training runs driven by a RunConfig."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..data import Sample, eval_by_task, gen_mixture, iterate_batches, steps_per_epoch
from ..model import EchoLoraModel, build_model
from ..objective import AdamW, StepResult, training_step
from ..routing import Router, RoutingSchedule
from .checkpoint import save_checkpoint
from .config import RunConfig
from .metrics import MetricsWriter, write_summary
from .serialize import model_to_checkpoint

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1_000_003


@dataclass
class RunResult:
    config: RunConfig
    model: EchoLoraModel
    accuracy: dict[str, float]
    steps: int
    seconds: float
    history: list[StepResult] = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy.values())))

    def summary(self) -> dict:
        routed = [h.r_k for h in self.history]
        return {
            "config_hash": self.config.config_hash(),
            "steps": self.steps,
            "seconds": round(self.seconds, 3),
            "accuracy": self.accuracy,
            "mean_accuracy": self.mean_accuracy,
            "mean_r_k": float(np.mean(routed)) if routed else None,
            "final_L_off": self.history[-1].l_off if self.history else None,
        }


def make_datasets(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    """Train and eval mixtures; eval prompts that also occur in train are dropped."""
    spec = cfg.data.task_spec()
    vocab = cfg.backbone.vocab_size
    train = gen_mixture(cfg.data.tasks, cfg.data.n_train_per_task, cfg.seeds.data, spec, vocab)
    candidates = gen_mixture(cfg.data.tasks, cfg.data.n_eval_per_task,
                             cfg.seeds.data + EVAL_SEED_OFFSET, spec, vocab)
    seen = {s.prompt_tokens for s in train}
    held_out = [s for s in candidates if s.prompt_tokens not in seen]
    return train, held_out


def build_from_config(cfg: RunConfig) -> EchoLoraModel:
    return build_model(cfg.backbone, cfg.adapter.kind, cfg.adapter.targets, cfg.adapter.rank,
                       cfg.adapter.alpha, cfg.adapter.dropout, cfg.echo.to_echo_config(),
                       init_seed=cfg.seeds.init)


def total_steps(cfg: RunConfig, n_train: int) -> int:
    """K is fixed before training starts: it sets the routing decay."""
    return steps_per_epoch(n_train, cfg.train.batch_size) * cfg.train.epochs


def run_training(cfg: RunConfig, out_dir=None, router_force: int | None = None,
                 on_step: Callable[[StepResult], None] | None = None) -> RunResult:
    """Train, checkpoint after every epoch (when ``out_dir`` is set) and evaluate."""
    cfg.validate()
    t0 = time.perf_counter()
    train, held_out = make_datasets(cfg)
    model = build_from_config(cfg)
    K = total_steps(cfg, len(train))
    router = None
    if model.echo_enabled:
        schedule = RoutingSchedule(cfg.routing.p_start, cfg.routing.p_end, K, cfg.seeds.routing)
        router = Router(schedule, force=router_force)
    optimizer = AdamW.from_objective(model.parameters(), cfg.objective)
    order_rng = np.random.default_rng([cfg.seeds.data, 1])
    out = Path(out_dir) if out_dir is not None else None
    writer = MetricsWriter(out / "metrics.csv") if out is not None else None
    history: list[StepResult] = []
    k = 0
    try:
        for epoch in range(cfg.train.epochs):
            for batch in iterate_batches(train, cfg.train.batch_size, order_rng,
                                         cfg.backbone.max_seq_len, cfg.backbone.vocab_size):
                r = training_step(model, batch, k, router, optimizer, cfg.objective,
                                  cfg.seeds.dropout)
                history.append(r)
                if writer is not None:
                    writer.write(r)
                if on_step is not None:
                    on_step(r)
                k += 1
            log.info("epoch %d done: step %d, L_off %.4f", epoch + 1, k, history[-1].l_off)
            if out is not None:
                save_checkpoint(model_to_checkpoint(model, cfg, {"epoch": epoch + 1, "step": k}),
                                out / f"epoch{epoch + 1}.ckpt")
    finally:
        if writer is not None:
            writer.close()
    accuracy = eval_by_task(model, held_out)
    result = RunResult(cfg, model, accuracy, k, time.perf_counter() - t0, history, out)
    if out is not None:
        save_checkpoint(model_to_checkpoint(model, cfg, {"epoch": cfg.train.epochs, "step": k}),
                        out / "final.ckpt")
        write_summary(out / "summary.json", result.summary())
    return result
