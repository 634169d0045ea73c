"""Frozen backbone + trainable adapters (+ optional echo modules) as one object."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapters import AdapterSet, init_adapter_set, merge_lora
from .backbone import BackboneConfig, FrozenWeights, LayerTrace, forward, init_backbone
from .echo import EchoConfig, InjectionContext, init_echo_set


@dataclass
class EchoLoraModel:
    weights: FrozenWeights
    adapters: AdapterSet
    echo_config: EchoConfig | None = None

    @property
    def config(self) -> BackboneConfig:
        return self.weights.config

    @property
    def vocab_size(self) -> int:
        return self.weights.config.vocab_size

    @property
    def echo_enabled(self) -> bool:
        return self.echo_config is not None and bool(self.adapters.echo)

    def forward(self, tokens, echo_ctx: InjectionContext | None = None,
                dropout_rng: np.random.Generator | None = None) -> tuple[ad.Tensor, LayerTrace]:
        return forward(self.weights, self.adapters, tokens, echo_ctx, dropout_rng)

    def echo_off_logits(self, tokens) -> np.ndarray:
        """Deployment path: no echo, no dropout, no graph."""
        with ad.no_grad():
            logits, _ = forward(self.weights, self.adapters, tokens)
        return logits.data

    def parameters(self) -> list[ad.Tensor]:
        return self.adapters.parameters()


def build_model(backbone: BackboneConfig, adapter_kind: str = "lora",
                adapter_targets=("q", "k", "v", "o"), rank: int = 16, alpha: float = 32.0,
                dropout_p: float = 0.05, echo: EchoConfig | None = None,
                init_seed: int = 0) -> EchoLoraModel:
    """Adapters and echo modules draw from separate seeded streams.

    Toggling echo therefore never changes the adapter initialisation.
    """
    weights = init_backbone(backbone)
    adapters = init_adapter_set(weights, adapter_kind, adapter_targets, rank, alpha, dropout_p,
                                np.random.default_rng([init_seed, 0]))
    if echo is not None:
        adapters.echo = init_echo_set(echo, backbone.n_layers, backbone.d_model,
                                      np.random.default_rng([init_seed, 1]))
    return EchoLoraModel(weights, adapters, echo)


def merged_weights(model: EchoLoraModel) -> FrozenWeights:
    """Backbone weights with every adapter folded in; echo modules are ignored."""
    tensors = dict(model.weights.tensors)
    for (layer, proj), p in model.adapters.modules.items():
        name = f"layers.{layer}.w{proj}"
        tensors[name] = ad.Tensor(merge_lora(tensors[name], p))
    return FrozenWeights(model.config, tensors)


def merged_logits(model: EchoLoraModel, tokens) -> np.ndarray:
    """Forward through the merged weights with no adapters attached."""
    with ad.no_grad():
        logits, _ = forward(merged_weights(model), None, tokens)
    return logits.data
