"""Two-pass training objective, masked distillation and the AdamW update.

A step runs the echo-off pass first (supervised loss plus the hidden-state
trace), then, only when routing fires, the echo-on pass with injection. The
total is ``L_off + r * (L_on + lambda_kd * L_kd)`` where ``L_kd`` treats the
echo-on logits as a detached teacher for the echo-off student.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import IGNORE_INDEX, MaskedLoss, Tensor
from .data import Batch
from .echo import InjectionContext
from .errors import ConfigError, TrainingError
from .model import EchoLoraModel
from .routing import Router


@dataclass
class ObjectiveConfig:
    lambda_kd: float = 1.0
    tau: float = 2.0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lambda_kd < 0:
            raise ConfigError(f"lambda_kd must be >= 0, got {self.lambda_kd}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.max_grad_norm < 0:
            raise ConfigError(f"max_grad_norm must be >= 0, got {self.max_grad_norm}")


# -- losses --------------------------------------------------------------------

def supervised_rows(labels) -> np.ndarray:
    """Boolean (B, T-1) selector of the logit rows that predict an answer token."""
    return np.asarray(labels)[..., 1:] != IGNORE_INDEX


def lm_loss(logits: Tensor, labels) -> MaskedLoss:
    """Next-token cross-entropy: logits at t predict labels at t + 1."""
    labels = np.asarray(labels)
    if logits.ndim == 2:
        return ad.masked_cross_entropy(logits[:-1], labels[1:])
    return ad.masked_cross_entropy(logits[:, :-1], labels[:, 1:])


def kd_loss(logits_on: Tensor, logits_off: Tensor, positions, tau: float) -> MaskedLoss:
    """tau^2 / |A| * sum over A of KL(softmax(on/tau) || softmax(off/tau)).

    ``positions`` is a boolean selector over the leading axes of both logit
    tensors. The echo-on side is detached, so only ``logits_off`` receives
    gradient.
    """
    positions = np.asarray(positions, dtype=bool)
    n = int(positions.sum())
    if n == 0:
        return MaskedLoss(Tensor(0.0), 0)
    teacher = ad.detach(logits_on)[positions]
    student = logits_off[positions]
    kl = ad.kl_rows(ad.softmax_rows(teacher, tau), ad.softmax_rows(student, tau))
    return MaskedLoss(ad.scale(ad.sum_(kl), tau * tau / n), n)


@dataclass
class StepLosses:
    off: Tensor
    on: Tensor | None
    kd: Tensor | None
    total: Tensor
    route: int
    n_supervised: int
    gate_means: list = field(default_factory=list)
    logits_off: Tensor | None = None
    logits_on: Tensor | None = None


def _dropout_rng(seed: int | None, step: int, pass_idx: int):
    # One stream per (step, pass): routing outcomes never shift later dropout masks.
    return None if seed is None else np.random.default_rng([seed, step, pass_idx])


def compute_losses(model: EchoLoraModel, batch: Batch, route: int, objective: ObjectiveConfig,
                   dropout_seed: int | None = None, step: int = 0,
                   echo_override: np.ndarray | None = None,
                   teacher_override: np.ndarray | None = None) -> StepLosses:
    """Build the full two-pass graph for one batch.

    ``echo_override`` and ``teacher_override`` replace the normalised echo and
    the teacher logits by fixed arrays; finite-difference checks use them to
    hold the stop-gradient inputs constant while parameters are perturbed.
    """
    logits_off, trace = model.forward(batch.tokens, dropout_rng=_dropout_rng(dropout_seed, step, 0))
    l_off = lm_loss(logits_off, batch.labels)
    if route == 0 or not model.echo_enabled:
        return StepLosses(l_off.value, None, None, l_off.value, 0, l_off.count,
                          logits_off=logits_off)
    ctx = InjectionContext.build(trace, batch.labels, model.echo_config, 1, model.config.n_layers)
    if echo_override is not None:
        ctx = InjectionContext(Tensor(echo_override), ctx.mask, 1)
    logits_on, _ = model.forward(batch.tokens, echo_ctx=ctx,
                                 dropout_rng=_dropout_rng(dropout_seed, step, 1))
    l_on = lm_loss(logits_on, batch.labels)
    teacher = Tensor(teacher_override) if teacher_override is not None else logits_on
    rows = supervised_rows(batch.labels)
    l_kd = kd_loss(teacher[:, :-1], logits_off[:, :-1], rows, objective.tau)
    total = ad.add(l_off.value, ad.add(l_on.value, ad.scale(l_kd.value, objective.lambda_kd)))
    return StepLosses(l_off.value, l_on.value, l_kd.value, total, 1, l_off.count,
                      list(ctx.gate_means), logits_off, logits_on)


# -- optimiser -----------------------------------------------------------------

def adamw_update(w: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                 lr: float, beta1: float, beta2: float, eps: float,
                 weight_decay: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One decoupled-weight-decay Adam step (bias correction folded into the step size)."""
    if weight_decay:
        w = w * (1.0 - lr * weight_decay)
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    step_size = lr * math.sqrt(1.0 - beta2 ** t) / (1.0 - beta1 ** t)
    return w - step_size * m / (np.sqrt(v) + eps), m, v


class AdamW:
    """Per-parameter moments and step counts; parameters without a grad are skipped.

    With ``max_grad_norm > 0`` the gradients are first rescaled so that their
    global norm is at most that value.
    """

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, max_grad_norm: float = 0.0):
        self.params = list(params)
        self.max_grad_norm = max_grad_norm
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = [{"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
                      for p in self.params]

    @classmethod
    def from_objective(cls, params, objective: ObjectiveConfig) -> "AdamW":
        return cls(params, objective.lr, (objective.beta1, objective.beta2), objective.eps,
                   objective.weight_decay, objective.max_grad_norm)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError("non-finite gradient; update skipped")
        coef = 1.0
        if self.max_grad_norm > 0:
            norm = global_grad_norm(self.params)
            if norm > self.max_grad_norm:
                coef = self.max_grad_norm / (norm + 1e-6)
        for p, st in zip(self.params, self.state):
            if p.grad is None:
                continue
            st["t"] += 1
            g = p.grad if coef == 1.0 else p.grad * coef
            p.data, st["m"], st["v"] = adamw_update(p.data, g, st["m"], st["v"], st["t"],
                                                    self.lr, self.beta1, self.beta2, self.eps,
                                                    self.weight_decay)


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


# -- training steps ----------------------------------------------------------------

@dataclass
class StepResult:
    step: int
    p_k: float
    r_k: int
    l_off: float
    l_on: float | None
    l_kd: float | None
    l_total: float
    grad_norm: float
    gate_mean: float | None


def training_step(model: EchoLoraModel, batch: Batch, k: int, router: Router | None,
                  optimizer: AdamW, objective: ObjectiveConfig,
                  dropout_seed: int | None = None) -> StepResult:
    """One optimiser step of the routed two-pass objective.

    With echo disabled (``router`` None or no echo modules) this is a plain
    adapter step. A non-finite loss raises before any parameter changes.
    """
    if router is not None and model.echo_enabled:
        p_k, r_k = router.prob(k), router.sample(k)
    else:
        p_k, r_k = 0.0, 0
    losses = compute_losses(model, batch, r_k, objective, dropout_seed, k)
    if not np.isfinite(losses.total.data).all():
        raise TrainingError(f"step {k}: non-finite loss (L_off={losses.off.item()})")
    optimizer.zero_grad()
    ad.backward(losses.total)
    grad_norm = global_grad_norm(optimizer.params)
    optimizer.step()
    gate = float(np.mean(losses.gate_means)) if losses.gate_means else None
    return StepResult(step=k, p_k=p_k, r_k=r_k, l_off=losses.off.item(),
                      l_on=None if losses.on is None else losses.on.item(),
                      l_kd=None if losses.kd is None else losses.kd.item(),
                      l_total=losses.total.item(), grad_norm=grad_norm, gate_mean=gate)


def plain_training_step(model: EchoLoraModel, batch: Batch, k: int, optimizer: AdamW,
                        dropout_seed: int | None = None) -> float:
    """Reference LoRA/DoRA step with no echo machinery at all."""
    rng = None if dropout_seed is None else np.random.default_rng([dropout_seed, k, 0])
    logits, _ = model.forward(batch.tokens, dropout_rng=rng)
    loss = lm_loss(logits, batch.labels).value
    optimizer.zero_grad()
    ad.backward(loss)
    optimizer.step()
    return loss.item()
