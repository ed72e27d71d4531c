"""Declarative run configuration.

A run is fully described by one YAML file; unknown keys are rejected so a
typo cannot silently fall back to a default. The resolved config is
snapshotted into the output directory by every command. The ``model``
section starts from a named preset ("desk" or "paper") and applies explicit
field overrides on top.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import DatasetSpec, FINETUNE_MIXTURE, PRETRAIN_MIXTURE, TaskMixture
from .denoiser import ModelConfig, model_preset
from .diffusion import SamplerConfig
from .errors import ConfigError
from .losses import LossWeights, RelLossParams

OUT_ROOT_ENV = "LAYOUTGEN_OUT_ROOT"

DEFAULT_EVAL_TASKS = ("uncond", "c_to_sp", "cs_to_p", "completion", "refinement", "relationship")


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass(frozen=True)
class StageConfig:
    learning_rate: float = 2e-3
    batch_size: int = 32
    epochs: int = 60
    seed: int = 1
    mixture: TaskMixture = field(default_factory=lambda: PRETRAIN_MIXTURE)
    completion_keep_prob: float = 0.2
    relation_fraction: float = 0.1
    margin_alpha: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    rel_params: RelLossParams = field(default_factory=RelLossParams)
    tau_sig: float = 1.0
    delta_eps: float = 1e-6
    lora_rank: int = 4
    lora_alpha: float = 3.0
    lora_targets: str = "branchB.block*.attn.*"
    lora_include_output: bool = True


@dataclass(frozen=True)
class EvalConfig:
    tasks: tuple[str, ...] = DEFAULT_EVAL_TASKS
    relation_fraction: float = 0.1
    margin_alpha: float = 0.1
    refine_sigma: float = 0.01
    fid_feature_dim: int = 16
    fid_epochs: int = 300


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    device: str = "cpu"
    threads: int = 1
    out_dir: str = "runs/desk"
    model: ModelConfig = field(default_factory=lambda: model_preset("desk"))
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(ddim_steps=20))
    data: DatasetSpec = field(default_factory=DatasetSpec)
    pretrain: StageConfig = field(default_factory=StageConfig)
    finetune: StageConfig = field(default_factory=lambda: StageConfig(
        learning_rate=1e-3, epochs=40, mixture=FINETUNE_MIXTURE))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved_out_dir(self) -> Path:
        root = os.environ.get(OUT_ROOT_ENV)
        path = Path(self.out_dir)
        if root and not path.is_absolute():
            return Path(root) / path
        return path


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    if hint is TaskMixture and isinstance(value, (list, tuple)):
        return TaskMixture(*value)
    if dataclasses.is_dataclass(hint):
        if isinstance(value, hint):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping for {hint.__name__}")
        return _from_dict(hint, value, path)
    if origin is tuple:
        return tuple(value)
    if hint is float and isinstance(value, (int, float)):
        return float(value)
    return value


def _from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name in names & set(data):
        kwargs[name] = _coerce(data[name], hints[name], f"{path}.{name}".lstrip("."))
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section {path or cls.__name__}: {exc}") from exc


def _model_from_dict(data: dict) -> ModelConfig:
    data = dict(data)
    preset = data.pop("preset", "desk")
    valid = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(data) - valid
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return model_preset(preset, **data)


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = dict(raw)
    model_raw = raw.pop("model", None)
    cfg = _from_dict(RunConfig, raw)
    if model_raw is not None:
        cfg = dataclasses.replace(cfg, model=_model_from_dict(model_raw))
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    def encode(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: encode(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [encode(v) for v in value]
        return value

    return encode(cfg)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)
