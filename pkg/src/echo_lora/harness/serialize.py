"""Conversion between models and checkpoints."""

from __future__ import annotations

import numpy as np

from ..adapters import AdapterSet, DoraParams, LoraParams, strip_echo
from ..autodiff import Tensor
from ..backbone import FrozenWeights
from ..echo import EchoModuleParams
from ..errors import CheckpointError, ConfigError
from ..model import EchoLoraModel
from .checkpoint import Checkpoint
from .config import RunConfig


def model_tensors(model: EchoLoraModel, include_echo: bool = True) -> dict[str, np.ndarray]:
    out = dict(model.weights.named_arrays())
    out.update({n: t.data for n, t in model.adapters.named_adapter_tensors()})
    if include_echo:
        out.update({n: t.data for n, t in model.adapters.named_echo_tensors()})
    return out


def model_to_checkpoint(model: EchoLoraModel, cfg: RunConfig, meta: dict | None = None,
                        include_echo: bool = True) -> Checkpoint:
    return Checkpoint(model_tensors(model, include_echo), cfg.to_dict(), cfg.config_hash(),
                      dict(meta or {}))


def _group(tensors: dict[str, np.ndarray], prefix: str) -> dict[tuple[int, str], dict]:
    groups: dict[tuple[int, str], dict] = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        try:
            _, layer, proj, part = name.split(".")
            key = (int(layer), proj)
        except ValueError:
            raise CheckpointError(f"malformed tensor name {name!r}") from None
        groups.setdefault(key, {})[part] = arr
    return groups


def model_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig | None = None) -> EchoLoraModel:
    """Rebuild a model; echo modules come back only if the checkpoint holds them."""
    cfg = cfg or RunConfig.from_dict(ckpt.config)
    try:
        weights = FrozenWeights.from_arrays(cfg.backbone, ckpt.tensors)
    except ConfigError as exc:
        raise CheckpointError(str(exc)) from None
    modules = {}
    for key, parts in _group(ckpt.tensors, "adapter").items():
        if "A" not in parts or "B" not in parts:
            raise CheckpointError(f"adapter {key} lacks A or B")
        lora = LoraParams(Tensor(parts["A"], requires_grad=True),
                          Tensor(parts["B"], requires_grad=True),
                          cfg.adapter.alpha, cfg.adapter.dropout)
        modules[key] = (DoraParams(Tensor(parts["m"], requires_grad=True), lora)
                        if "m" in parts else lora)
    expected = [(layer, proj) for layer in range(cfg.backbone.n_layers)
                for proj in cfg.adapter.targets]
    missing = [k for k in expected if k not in modules]
    if missing:
        raise CheckpointError(f"checkpoint is missing adapter tensors for {missing[:4]}")
    echo = {key: EchoModuleParams.from_arrays(parts)
            for key, parts in _group(ckpt.tensors, "echo").items()}
    echo_cfg = cfg.echo.to_echo_config() if echo else None
    return EchoLoraModel(weights, AdapterSet(modules, echo), echo_cfg)


def expected_adapter_names(cfg: RunConfig) -> list[str]:
    parts = ("A", "B", "m") if cfg.adapter.kind == "dora" else ("A", "B")
    return [f"adapter.{layer}.{proj}.{p}" for layer in range(cfg.backbone.n_layers)
            for proj in cfg.adapter.targets for p in parts]


def export_deploy(ckpt: Checkpoint) -> Checkpoint:
    """Strip every echo tensor; the result serves the echo-off model unchanged."""
    cfg = RunConfig.from_dict(ckpt.config)
    tensors = strip_echo(ckpt.tensors, expected_adapter_names(cfg))
    meta = dict(ckpt.meta, deploy=True)
    return Checkpoint(tensors, ckpt.config, ckpt.config_hash, meta)
