"""Cross-layer echo: boundary extraction, projection/gating and masked injection.

Pass 1 runs the model without injection. The hidden states of the deep source
layers at each sample's boundary position (the token just before the first
supervised answer token) are averaged into one echo vector per sample and
detached. Pass 2 feeds the RMS-normalised echo through a small projection and
a sigmoid gate per (target layer, projection), and adds the result to that
projection's output at answer positions only.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import PROJECTIONS, kaiming_uniform
from .autodiff import IGNORE_INDEX, Tensor
from .errors import ConfigError, DataError, DimensionError

# Incremented by every echo entry point; lets tests prove a code path never touches echo.
CALL_COUNTS: Counter = Counter()


def resolve_layer_index(idx: int, n_layers: int) -> int:
    """Python-style indexing: -1 is the last block."""
    if not -n_layers <= idx < n_layers:
        raise ConfigError(f"layer index {idx} out of range for {n_layers} layers")
    return idx % n_layers


@dataclass
class EchoConfig:
    source_layers: list[int] = field(default_factory=lambda: [-4, -3])
    target_layers: list[int] = field(default_factory=lambda: [2, 3])
    target_projections: list[str] = field(default_factory=lambda: ["q", "v"])
    bottleneck_dim: int = 16
    gate_bias_init: float = -2.0
    lambda_init: float = 1.0
    answer_only: bool = True

    def resolved(self, n_layers: int) -> tuple[list[int], list[int]]:
        """Validate against a backbone depth; return (sources, targets) as plain indices."""
        if not self.source_layers or not self.target_layers or not self.target_projections:
            raise ConfigError("echo source_layers, target_layers and target_projections "
                              "must be non-empty")
        if self.bottleneck_dim < 1:
            raise ConfigError(f"bottleneck_dim must be >= 1, got {self.bottleneck_dim}")
        bad = [p for p in self.target_projections if p not in PROJECTIONS]
        if bad:
            raise ConfigError(f"unknown target projections {bad}")
        sources = sorted({resolve_layer_index(i, n_layers) for i in self.source_layers})
        targets = sorted({resolve_layer_index(i, n_layers) for i in self.target_layers})
        if min(sources) <= max(targets):
            raise ConfigError(f"source layers {sources} must all be deeper than "
                              f"target layers {targets}")
        return sources, targets


@dataclass
class EchoModuleParams:
    W1: Tensor
    W2: Tensor
    U1: Tensor
    U2: Tensor
    b: Tensor
    lam: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "W2": self.W2, "U1": self.U1, "U2": self.U2,
                "b": self.b, "lambda": self.lam}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "EchoModuleParams":
        return cls(*(Tensor(arrays[k], requires_grad=True)
                     for k in ("W1", "W2", "U1", "U2", "b", "lambda")))


def echo_param_count(d_model: int, d_out: int, bottleneck: int) -> int:
    return 2 * bottleneck * d_model + 2 * d_out * bottleneck + d_out + 1


def init_echo_params(config: EchoConfig, d_model: int, d_out: int,
                     rng: np.random.Generator) -> EchoModuleParams:
    """W1, U1 kaiming-uniform; W2, U2 zero so the first echo-on pass injects nothing."""
    k = config.bottleneck_dim
    return EchoModuleParams(
        W1=Tensor(kaiming_uniform(rng, (k, d_model)), requires_grad=True),
        W2=Tensor(np.zeros((d_out, k)), requires_grad=True),
        U1=Tensor(kaiming_uniform(rng, (k, d_model)), requires_grad=True),
        U2=Tensor(np.zeros((d_out, k)), requires_grad=True),
        b=Tensor(np.full(d_out, float(config.gate_bias_init)), requires_grad=True),
        lam=Tensor(np.array(float(config.lambda_init)), requires_grad=True),
    )


def init_echo_set(config: EchoConfig, n_layers: int, d_model: int,
                  rng: np.random.Generator) -> dict[tuple[int, str], EchoModuleParams]:
    _, targets = config.resolved(n_layers)
    return {(layer, proj): init_echo_params(config, d_model, d_model, rng)
            for layer in targets
            for proj in PROJECTIONS if proj in config.target_projections}


# -- masks and boundaries -----------------------------------------------------

def build_answer_mask(labels) -> np.ndarray:
    """1 where the label is supervised, 0 where it carries the ignore marker."""
    return (np.asarray(labels) != IGNORE_INDEX).astype(np.int64)


def find_boundary(labels) -> np.ndarray:
    """Index right before the first supervised label, per row.

    Supervised labels must form one contiguous run that does not start at 0.
    Accepts a single row (returns a 0-d array) or a (B, T) batch.
    """
    labels = np.asarray(labels)
    rows = np.atleast_2d(labels)
    out = np.empty(rows.shape[0], dtype=np.int64)
    for b, row in enumerate(rows):
        idx = np.flatnonzero(row != IGNORE_INDEX)
        if idx.size == 0:
            raise DataError(f"row {b} has no supervised label")
        if idx[0] == 0:
            raise DataError(f"row {b}: answer starts at position 0, no boundary exists")
        if idx[-1] - idx[0] + 1 != idx.size:
            raise DataError(f"row {b}: supervised labels are not contiguous")
        out[b] = idx[0] - 1
    return out[0] if labels.ndim == 1 else out


# -- echo vector ----------------------------------------------------------------

def extract_echo(trace, source_layers, t_star) -> Tensor:
    """Mean of the source blocks' outputs at the boundary position, detached.

    ``trace`` is a :class:`~echo_lora.backbone.LayerTrace`. ``t_star`` is an int
    for an unbatched trace or an int array of shape (B,).
    """
    CALL_COUNTS["extract_echo"] += 1
    if len(source_layers) == 0:
        raise ConfigError("extract_echo needs at least one source layer")
    acc = None
    for layer in source_layers:
        h = trace.block_output(layer).data
        if h.ndim == 2:
            row = h[int(t_star)]
        else:
            ts = np.asarray(t_star)
            if np.any(ts >= h.shape[1]):
                raise DataError("boundary position beyond sequence length")
            row = h[np.arange(h.shape[0]), ts]
        acc = row.copy() if acc is None else acc + row
    return ad.detach(Tensor(acc / len(source_layers)))


def normalize_echo(z) -> Tensor:
    """Parameter-free RMS normalisation."""
    return ad.rms_norm(z)


def project_and_gate(z_bar: Tensor, p: EchoModuleParams,
                     return_gate: bool = False):
    squeeze = z_bar.ndim == 1
    zb = ad.reshape(z_bar, (1, -1)) if squeeze else z_bar
    if zb.shape[-1] != p.W1.shape[1]:
        raise DimensionError(f"echo vector {z_bar.shape} does not fit W1{p.W1.shape}")
    e = ad.matmul(ad.tanh(ad.matmul(zb, ad.transpose(p.W1))), ad.transpose(p.W2))
    pre = ad.matmul(ad.tanh(ad.matmul(zb, ad.transpose(p.U1))), ad.transpose(p.U2))
    g = ad.sigmoid(ad.add(pre, p.b))
    delta = ad.mul(p.lam, ad.mul(e, g))
    if squeeze:
        delta = ad.reshape(delta, (-1,))
        g = ad.reshape(g, (-1,))
    return (delta, g) if return_gate else delta


def compute_injection(z, p: EchoModuleParams, return_gate: bool = False):
    """delta = lambda * (W2 tanh(W1 zbar)) * sigmoid(U2 tanh(U1 zbar) + b), zbar = RMS(z)."""
    CALL_COUNTS["compute_injection"] += 1
    z = ad.as_tensor(z)
    if not np.all(np.isfinite(z.data)):
        raise DataError("echo vector is not finite")
    return project_and_gate(normalize_echo(z), p, return_gate)


def inject(o: Tensor, delta: Tensor, mask, route: int) -> Tensor:
    """o[t] + route * mask[t] * delta, with one delta per sample.

    Accepts ``o`` of shape (T, d) with ``delta`` (d,) and mask (T,), or the
    batched (B, T, d) / (B, d) / (B, T). Unmasked rows are returned untouched.
    """
    CALL_COUNTS["inject"] += 1
    if route not in (0, 1):
        raise DataError(f"route must be 0 or 1, got {route}")
    if route == 0:
        return o
    mask = np.asarray(mask).astype(bool)
    batched = o.ndim == 3
    od = o.data if batched else o.data[None]
    dd = delta.data if batched else delta.data[None]
    md = mask if batched else mask[None]
    if od.shape[:2] != md.shape or dd.shape != (od.shape[0], od.shape[2]):
        raise DimensionError(f"inject: o{o.shape}, delta{delta.shape}, mask{mask.shape} disagree")
    b_idx, t_idx = np.nonzero(md)
    out = od.copy()
    out[b_idx, t_idx] = od[b_idx, t_idx] + dd[b_idx]
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        gd = np.zeros_like(dd)
        np.add.at(gd, b_idx, gb[b_idx, t_idx])
        return g, (gd if batched else gd[0])

    return ad.custom_op(out, (o, delta), backward, "inject")


@dataclass(frozen=True)
class InjectionContext:
    """Everything pass 2 needs: normalised detached echo, answer mask, route."""

    z_bar: Tensor
    mask: np.ndarray
    route: int
    gate_means: list = field(default_factory=list, compare=False)

    @classmethod
    def build(cls, trace, labels, config: EchoConfig, route: int,
              n_layers: int) -> "InjectionContext":
        sources, _ = config.resolved(n_layers)
        labels = np.asarray(labels)
        t_star = find_boundary(labels)
        z = extract_echo(trace, sources, t_star)
        if config.answer_only:
            mask = build_answer_mask(labels)
        else:
            mask = np.ones(labels.shape, dtype=np.int64)
        return cls(z_bar=ad.detach(normalize_echo(z)), mask=mask, route=int(route))

    def apply(self, o: Tensor, p: EchoModuleParams) -> Tensor:
        """Injected output of one target module."""
        CALL_COUNTS["compute_injection"] += 1
        delta, gate = project_and_gate(self.z_bar, p, return_gate=True)
        self.gate_means.append(float(gate.data.mean()))
        return inject(o, delta, self.mask, self.route)
