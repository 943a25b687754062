"""Flat ``key = value`` run configuration shared by every CLI subcommand."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .model import PRESETS, ModelConfig
from .training import FINE_TUNE_LR, TrainConfig

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


@dataclass
class RunConfig:
    # paths
    dataset: Optional[str] = None
    splits_file: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    # model; unset keys come from the preset
    preset: str = "small"
    n_stages: Optional[int] = None
    base_channels: Optional[int] = None
    channel_growth: Optional[int] = None
    convs_per_stage: Optional[int] = None
    relation_hidden: Optional[int] = None
    relation_channels: Optional[int] = None
    input_size: Optional[int] = None
    max_channels: Optional[int] = None
    # training
    loss: str = "bce"
    lr0: float = 1e-3
    fine_tune_lr: float = FINE_TUNE_LR
    halve_every: int = 50_000
    n_episodes: int = 500_000
    k_shot: int = 5
    n_query: int = 1
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_episodes_per_class: int = 2
    overfit: bool = False
    workers: int = 1
    # evaluation
    split: str = "test"
    episodes_per_class: int = 5
    threshold: float = 0.5
    k_values: str = "1,3,5,7"
    # dataset tooling
    per_super_val: int = 20
    per_super_test: int = 20
    holdout: int = 0
    n_classes: int = 30
    distractors: int = 0

    def model_config(self) -> ModelConfig:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        overrides = {k: getattr(self, k) for k in MODEL_KEYS if getattr(self, k) is not None}
        return dataclasses.replace(PRESETS[self.preset], **overrides).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in TRAIN_KEYS})

    def k_list(self):
        return [int(k) for k in str(self.k_values).split(",") if k.strip()]

    def dumps(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


_TYPES = {f.name: f.type for f in fields(RunConfig)}


class ConfigError(KeyError):
    """Unknown key or malformed line in a config file."""

    def __str__(self):
        return str(self.args[0])


def coerce(key, raw):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if isinstance(raw, str):
        raw = raw.strip()
        if raw == "" and kind.startswith("Optional"):
            return None
    else:
        return raw
    base = kind.removeprefix("Optional[").removesuffix("]")
    if base == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if base in ("int", "float"):
        try:
            return int(raw) if base == "int" else float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected {base}, got {raw!r}") from None
    return raw


def parse_config_text(text):
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        values[key] = coerce(key, raw)
    return values


def resolve(config_path=None, overrides=None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides."""
    values = {}
    if config_path:
        values.update(parse_config_text(Path(config_path).read_text()))
    for key, value in (overrides or {}).items():
        values[key] = coerce(key, value)
    return RunConfig(**values)
