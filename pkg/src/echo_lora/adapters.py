"""LoRA and DoRA reparameterizations of frozen projection weights.

Weights follow the ``(d_out, d_in)`` layout, so a projection computes
``u @ W.T``. The low-rank update is ``(alpha / r) * B @ A`` with ``A`` of shape
``(r, d_in)`` and ``B`` of shape ``(d_out, r)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, DimensionError

PROJECTIONS = ("q", "k", "v", "o")
DORA_EPS = 1e-8


@dataclass
class LoraParams:
    A: Tensor
    B: Tensor
    alpha: float
    dropout_p: float = 0.0

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def tensors(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}


@dataclass
class DoraParams:
    m: Tensor
    lora: LoraParams

    @property
    def rank(self) -> int:
        return self.lora.rank

    def tensors(self) -> dict[str, Tensor]:
        return {"A": self.lora.A, "B": self.lora.B, "m": self.m}


Adapter = Union[LoraParams, DoraParams]


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """torch's default Linear init: kaiming-uniform with a=sqrt(5), i.e. U(-1/sqrt(fan_in), +)."""
    bound = 1.0 / math.sqrt(shape[1])
    return rng.uniform(-bound, bound, size=shape)


def init_lora(rng: np.random.Generator, d_out: int, d_in: int, rank: int, alpha: float,
              dropout_p: float = 0.0) -> LoraParams:
    if rank < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
    cap = min(d_in, d_out)
    if rank > cap:
        warnings.warn(f"LoRA rank {rank} exceeds min(d_in, d_out)={cap}; capping", stacklevel=2)
        rank = cap
    A = Tensor(kaiming_uniform(rng, (rank, d_in)), requires_grad=True)
    B = Tensor(np.zeros((d_out, rank)), requires_grad=True)
    return LoraParams(A=A, B=B, alpha=float(alpha), dropout_p=float(dropout_p))


def row_norms(W: np.ndarray) -> np.ndarray:
    return np.linalg.norm(W, axis=1)


def init_dora(rng: np.random.Generator, W: np.ndarray, rank: int, alpha: float,
              dropout_p: float = 0.0) -> DoraParams:
    d_out, d_in = W.shape
    lora = init_lora(rng, d_out, d_in, rank, alpha, dropout_p)
    return DoraParams(m=Tensor(row_norms(W), requires_grad=True), lora=lora)


def _check_rank(W: Tensor, p: LoraParams, u: Tensor) -> None:
    d_out, d_in = W.shape
    if p.rank > min(d_in, d_out):
        raise ConfigError(f"rank {p.rank} exceeds min(d_in, d_out)={min(d_in, d_out)}")
    if p.A.shape != (p.rank, d_in) or p.B.shape != (d_out, p.rank):
        raise DimensionError(f"adapter shapes A{p.A.shape} B{p.B.shape} do not fit W{W.shape}")
    if u.shape[-1] != d_in:
        raise DimensionError(f"input {u.shape} does not fit W{W.shape}")


def _dropout_keep(shape, p: float, rng: np.random.Generator | None) -> np.ndarray | None:
    """Inverted-dropout multiplier (0 or 1/(1-p)), or None when dropout is off."""
    if rng is None or p <= 0.0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


def lora_projection(u: Tensor, W: Tensor, A: Tensor, B: Tensor, scale: float,
                    keep: np.ndarray | None = None) -> Tensor:
    """``u W^T + scale * ((u * keep) A^T) B^T`` as a single graph node."""
    lead = u.shape[:-1]
    u2 = u.data.reshape(-1, u.shape[-1])
    k2 = None if keep is None else keep.reshape(u2.shape)
    ud = u2 if k2 is None else u2 * k2
    h = ud @ A.data.T
    out = u2 @ W.data.T + scale * (h @ B.data.T)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gB = scale * (g2.T @ h) if B.requires_grad else None
        gh = scale * (g2 @ B.data)
        gA = gh.T @ ud if A.requires_grad else None
        gu = None
        if u.requires_grad:
            low = gh @ A.data
            gu = (g2 @ W.data + (low if k2 is None else low * k2)).reshape(u.shape)
        gW = g2.T @ u2 if W.requires_grad else None
        return gu, gW, gA, gB

    return ad.custom_op(out.reshape(*lead, W.shape[0]), (u, W, A, B), backward, "lora")


def linear(u: Tensor, W: Tensor) -> Tensor:
    return ad.linear(u, W)


def lora_forward(W: Tensor, p: LoraParams, u: Tensor,
                 dropout_rng: np.random.Generator | None = None) -> Tensor:
    """o = u W^T + (alpha/r) (u A^T) B^T; dropout hits only the low-rank branch."""
    _check_rank(W, p, u)
    return lora_projection(u, W, p.A, p.B, p.scale,
                           _dropout_keep(u.shape, p.dropout_p, dropout_rng))


def dora_direction_scale(W: Tensor, p: DoraParams) -> Tensor:
    """m / ||W + (alpha/r) B A|| per output row, the norm floored at 1e-8."""
    lora = p.lora
    combined = ad.add(W, ad.scale(ad.matmul(lora.B, lora.A), lora.scale))
    norms = ad.sqrt(ad.sum_(ad.mul(combined, combined), axis=1))
    return ad.div(p.m, ad.clamp_min(norms, DORA_EPS))


def dora_forward(W: Tensor, p: DoraParams, u: Tensor,
                 dropout_rng: np.random.Generator | None = None) -> Tensor:
    """o = u (m * rownormalize(W + (alpha/r) B A))^T.

    Computed as the LoRA output rescaled per output unit, which is the same
    product when dropout is off.
    """
    _check_rank(W, p.lora, u)
    if p.m.shape != (W.shape[0],):
        raise DimensionError(f"magnitude {p.m.shape} does not fit W{W.shape}")
    base = lora_forward(W, p.lora, u, dropout_rng)
    return ad.mul(base, dora_direction_scale(W, p))


def adapter_forward(W: Tensor, p: Adapter | None, u: Tensor,
                    dropout_rng: np.random.Generator | None = None) -> Tensor:
    if p is None:
        return linear(u, W)
    if isinstance(p, DoraParams):
        return dora_forward(W, p, u, dropout_rng)
    return lora_forward(W, p, u, dropout_rng)


def merge_lora(W, p: Adapter) -> np.ndarray:
    """Fold an adapter into a plain weight matrix.

    LoRA gives ``W + (alpha/r) B A``; DoRA gives the explicit
    ``m * rownormalize(W + (alpha/r) B A)``.
    """
    Wd = W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float64)
    lora = p.lora if isinstance(p, DoraParams) else p
    merged = Wd + lora.scale * (lora.B.data @ lora.A.data)
    if isinstance(p, DoraParams):
        norms = np.maximum(row_norms(merged), DORA_EPS)
        merged = (p.m.data / norms)[:, None] * merged
    return merged


@dataclass
class AdapterSet:
    """Trainable state attached to a frozen backbone.

    ``modules`` maps (layer, projection) to its LoRA/DoRA parameters;
    ``echo`` maps (layer, projection) to the echo projection/gate parameters.
    """

    modules: dict[tuple[int, str], Adapter] = field(default_factory=dict)
    echo: dict = field(default_factory=dict)

    def get(self, layer: int, proj: str) -> Adapter | None:
        return self.modules.get((layer, proj))

    def named_adapter_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for (layer, proj) in sorted(self.modules, key=_key_order):
            for name, t in self.modules[(layer, proj)].tensors().items():
                yield f"adapter.{layer}.{proj}.{name}", t

    def named_echo_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for (layer, proj) in sorted(self.echo, key=_key_order):
            for name, t in self.echo[(layer, proj)].tensors().items():
                yield f"echo.{layer}.{proj}.{name}", t

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.named_adapter_tensors()) + list(self.named_echo_tensors())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def adapter_parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_adapter_tensors()]

    def echo_parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_echo_tensors()]

    def count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def without_echo(self) -> "AdapterSet":
        return AdapterSet(modules=dict(self.modules), echo={})


def _key_order(key: tuple[int, str]) -> tuple[int, int]:
    return key[0], PROJECTIONS.index(key[1])


def init_adapter_set(weights, kind: str, targets, rank: int, alpha: float,
                     dropout_p: float, rng: np.random.Generator,
                     layers=None) -> AdapterSet:
    """One adapter per (layer, projection) over ``layers`` (default: all)."""
    if kind not in ("lora", "dora"):
        raise ConfigError(f"adapter kind must be 'lora' or 'dora', got {kind!r}")
    cfg = weights.config
    layers = range(cfg.n_layers) if layers is None else layers
    modules: dict[tuple[int, str], Adapter] = {}
    for layer in layers:
        for proj in PROJECTIONS:
            if proj not in targets:
                continue
            W = weights.projection(layer, proj).data
            if kind == "lora":
                modules[(layer, proj)] = init_lora(rng, W.shape[0], W.shape[1], rank, alpha,
                                                   dropout_p)
            else:
                modules[(layer, proj)] = init_dora(rng, W, rank, alpha, dropout_p)
    return AdapterSet(modules=modules)


def strip_echo(tensors: dict[str, np.ndarray],
               expected_adapters: list[str] | None = None) -> dict[str, np.ndarray]:
    """Drop every ``echo.*`` tensor, keeping backbone and adapter tensors.

    ``expected_adapters`` lists adapter tensor names that must be present.
    """
    if expected_adapters is not None:
        missing = [n for n in expected_adapters if n not in tensors]
        if missing:
            raise CheckpointError(f"checkpoint is missing adapter tensors: {missing[:4]}")
    elif not any(n.startswith("adapter.") for n in tensors):
        raise CheckpointError("checkpoint holds no adapter tensors")
    return {n: t for n, t in tensors.items() if not n.startswith("echo.")}
