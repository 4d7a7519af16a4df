"""Nested dataclass experiment config, loadable from YAML with dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .answer_filter import BeamConfig
from .generator import SamplingConfig, TrainConfig
from .model import ModelConfig
from .objectives import PRETRAIN_TASKS, MaskConfig


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_images: int = 2000          # training images (oracle annotations)
    n_generate: int = 200         # held-out images the generator annotates
    max_boxes: int = 3


@dataclass
class GenerationJobConfig:
    chunk_images: int = 16
    batch_rows: int = 64
    caption_source: str = "generated"  # or "oracle"


@dataclass
class PretrainConfig:
    mode: str = "two_pass"        # or "shared"
    steps: int = 500
    batch_size: int = 16
    lr: float = 5e-4
    warmup_steps: int = 20
    tasks: tuple[str, ...] = PRETRAIN_TASKS
    log_every: int = 50


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)  # vocab_size is taken from the vocab
    world: WorldConfig = field(default_factory=WorldConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)
    generator_train: TrainConfig = field(default_factory=TrainConfig)
    filter_train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    beam: BeamConfig = field(default_factory=BeamConfig)
    generation: GenerationJobConfig = field(default_factory=GenerationJobConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        """Hash of every setting that shapes the data; the output location is left out."""
        settings = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        blob = json.dumps(settings, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(hints)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, f in hints.items():
        current = getattr(defaults, name)
        if name not in data:
            kwargs[name] = current
            continue
        value = data[name]
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, key)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        elif isinstance(current, bool) or current is None:
            kwargs[name] = value
        elif isinstance(current, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        elif isinstance(current, int) and isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        else:
            kwargs[name] = type(current)(value) if isinstance(current, (int, float, str)) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> ExperimentConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data = apply_overrides(data, overrides or [])
    if seed is not None:
        data["seed"] = seed
    cfg = _build(ExperimentConfig, data, "")
    # one seed drives every random stream
    cfg.sampling.seed = cfg.seed
    cfg.generator_train.seed = cfg.seed
    cfg.filter_train.seed = cfg.seed + 1
    return cfg


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
