"""Echo-LoRA on a toy numpy transformer.

A frozen decoder-only backbone is adapted with LoRA or DoRA. During training
an auxiliary echo path injects a gated summary of deep-layer boundary states
into shallow adapter outputs; it is routed stochastically, distilled into the
plain path and stripped before deployment.
"""

from .adapters import AdapterSet, DoraParams, LoraParams, merge_lora, strip_echo
from .backbone import BackboneConfig, FrozenWeights, forward, init_backbone
from .data import TASKS, Batch, Sample, TaskSpec, collate, eval_accuracy, gen_dataset, gen_mixture
from .echo import EchoConfig, InjectionContext, compute_injection, extract_echo, inject
from .errors import (CheckpointError, ConfigError, DataError, DimensionError, EchoLoraError,
                     NumericError, TrainingError, UsageError)
from .model import EchoLoraModel, build_model, merged_logits, merged_weights
from .objective import AdamW, ObjectiveConfig, StepResult, compute_losses, training_step
from .routing import Router, RoutingSchedule, routing_prob

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AdapterSet", "BackboneConfig", "Batch", "CheckpointError", "ConfigError",
    "DataError", "DimensionError", "DoraParams", "EchoConfig", "EchoLoraError", "EchoLoraModel",
    "FrozenWeights", "InjectionContext", "LoraParams", "NumericError", "ObjectiveConfig",
    "Router", "RoutingSchedule", "Sample", "StepResult", "TASKS", "TaskSpec", "TrainingError",
    "UsageError", "build_model", "collate", "compute_injection", "compute_losses",
    "eval_accuracy", "extract_echo", "forward", "gen_dataset", "gen_mixture", "init_backbone",
    "inject", "merge_lora", "merged_logits", "merged_weights", "routing_prob", "strip_echo",
    "training_step",
]
