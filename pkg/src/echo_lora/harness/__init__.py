"""Configuration, checkpoints, metrics, training runs and the ablation grid."""

from .ablation import VARIANT_IDS, VARIANTS, AblationSpec, get_variant, run_ablation
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_config, parse_config_text
from .runner import RunResult, build_from_config, make_datasets, run_training
from .serialize import export_deploy, model_from_checkpoint, model_to_checkpoint

__all__ = [
    "AblationSpec", "Checkpoint", "RunConfig", "RunResult", "VARIANTS", "VARIANT_IDS",
    "build_from_config", "dump_config", "export_deploy", "get_variant", "load_checkpoint",
    "load_config", "make_datasets", "model_from_checkpoint", "model_to_checkpoint",
    "parse_config_text", "run_ablation", "run_training", "save_checkpoint",
]
