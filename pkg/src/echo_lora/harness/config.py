"""Run configuration and its flat ``section.key = value`` text format.

One assignment per line; values are JSON literals (numbers, ``true``,
``[-4, -3]``, ``"lora"``) and a bare word is read as a string. ``#`` starts a
comment line. Unknown keys and ill-typed values are rejected with the file
and line number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from ..backbone import BackboneConfig
from ..data import TASKS, TaskSpec
from ..echo import EchoConfig
from ..errors import ConfigError
from ..objective import ObjectiveConfig


@dataclass
class AdapterConfig:
    kind: str = "lora"
    targets: list[str] = field(default_factory=lambda: ["q", "k", "v", "o"])
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.05


@dataclass
class EchoSection(EchoConfig):
    enabled: bool = True

    def to_echo_config(self) -> EchoConfig | None:
        if not self.enabled:
            return None
        kw = {f.name: getattr(self, f.name) for f in fields(EchoConfig)}
        return EchoConfig(**kw)


@dataclass
class RoutingConfig:
    p_start: float = 1.0
    p_end: float = 0.2


@dataclass
class DataConfig:
    tasks: list[str] = field(default_factory=lambda: list(TASKS))
    n_train_per_task: int = 2500
    n_eval_per_task: int = 200
    alphabet: int = 16
    min_len: int = 3
    max_len: int = 3
    modulus: int = 10

    def task_spec(self, marker: bool = True) -> TaskSpec:
        return TaskSpec(self.alphabet, self.min_len, self.max_len, self.modulus, marker)


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 16


@dataclass
class SeedConfig:
    init: int = 0
    data: int = 0
    routing: int = 0
    dropout: int = 0

    def all(self, seed: int) -> "SeedConfig":
        return SeedConfig(seed, seed, seed, seed)


@dataclass
class OutputConfig:
    dir: str = "runs/default"


SECTIONS = {
    "backbone": BackboneConfig,
    "adapter": AdapterConfig,
    "echo": EchoSection,
    "routing": RoutingConfig,
    "objective": ObjectiveConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "seeds": SeedConfig,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    """Full record of one run. Defaults are the toy-scale training setup."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    echo: EchoSection = field(default_factory=EchoSection)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def config_hash(self) -> str:
        """sha256 of everything except the output location."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seeds=SeedConfig().all(seed))

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def validate(self) -> "RunConfig":
        if self.adapter.kind not in ("lora", "dora"):
            raise ConfigError(f"adapter.kind must be lora or dora, got {self.adapter.kind!r}")
        if self.echo.enabled:
            self.echo.resolved(self.backbone.n_layers)
        if not 0.0 <= self.routing.p_end <= self.routing.p_start <= 1.0:
            raise ConfigError("routing needs 0 <= p_end <= p_start <= 1")
        if self.train.epochs < 1 or self.train.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        unknown = [t for t in self.data.tasks if t not in TASKS]
        if unknown or not self.data.tasks:
            raise ConfigError(f"data.tasks must be a non-empty subset of {TASKS}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {}
        for name, typ in SECTIONS.items():
            values = d.get(name, {})
            unknown = set(values) - {f.name for f in fields(typ)}
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
            sections[name] = _build(typ, values, where=name)
        return cls(**sections)


def _build(typ, values: dict, where: str):
    base = typ()
    kw = {f.name: getattr(base, f.name) for f in fields(typ)}
    for key, value in values.items():
        kw[key] = _coerce(value, getattr(base, key), f"{where}.{key}")
    try:
        return typ(**kw)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _coerce(value: Any, default: Any, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        if default and any(type(v) is not type(default[0]) for v in value):
            raise ConfigError(f"{key} expects a list of {type(default[0]).__name__}")
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    return value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse the flat format; every error names ``source:line``."""
    raw: dict[str, dict] = {name: {} for name in SECTIONS}
    where: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, _, value = (s.strip() for s in stripped.partition("="))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if name not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in where:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} "
                              f"(first set on line {where[key]})")
        where[key] = lineno
        raw[section][name] = _parse_value(value)
    try:
        return RunConfig.from_dict(raw).validate()
    except ConfigError as exc:
        msg = str(exc)
        line = next((n for k, n in where.items() if k in msg or k.split(".")[0] + ":" in msg), None)
        raise ConfigError(f"{source}:{line}: {msg}" if line else f"{source}: {msg}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name, values in cfg.to_dict().items():
        lines.append(f"# {name}")
        for key, value in values.items():
            lines.append(f"{name}.{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"
