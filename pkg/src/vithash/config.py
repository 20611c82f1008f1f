"""Experiment configuration: YAML files, dotted ``key=value`` overrides, presets.

A config file is a YAML mapping whose sections mirror :class:`ExperimentConfig`::

    preset: full
    data: {root: data/ucmd, image_size: 224}
    teacher: {hidden_dim: 512, num_layers: 12, patch_size: 16}
    loss: {gamma: 0.3}

Omitted keys take defaults. The preset is applied first, then the file's
explicit values, then ``--set`` overrides.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .augmentation import AugmentConfig
from .backbone import ConfigError, EncoderConfig
from .data import SplitSpec
from .objectives import LossConfig

OUTPUT_ROOT_ENV = "VITHASH_OUTPUT_ROOT"

PRESETS = ("teacher", "method1", "method2", "method3", "method4", "method5", "full")

# Loss weights and augmentation per ablation preset. None leaves the value alone.
_PRESET_TABLE = {
    "teacher": dict(augment=True),
    "method1": dict(alpha_student=0.0, beta_student=0.0, gamma=0.0, augment=False),
    "method2": dict(alpha_student=2.0, beta_student=0.0, gamma=0.0, augment=False),
    "method3": dict(alpha_student=2.0, beta_student=0.0, gamma=0.0, augment=True),
    "method4": dict(alpha_student=2.0, beta_student=2.0, gamma=0.0, augment=False),
    "method5": dict(alpha_student=2.0, beta_student=2.0, gamma=0.3, augment=False),
    "full": dict(alpha_student=2.0, beta_student=2.0, gamma=0.3, augment=True),
}


@dataclass
class DataConfig:
    root: str = "data"
    image_size: int = 224
    normalize_mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    normalize_std: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])


@dataclass
class OptimConfig:
    learning_rate: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    cosine: bool = False


@dataclass
class EvalConfig:
    k_grid: list[int] = field(default_factory=lambda: [1, 5, 10, 20, 50, 100])
    map_cutoff: int | None = None
    query_split: str = "test"
    gallery_split: str = "train"


@dataclass
class ExperimentConfig:
    preset: str = "full"
    seed: int = 0
    deterministic: bool = False
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    teacher: EncoderConfig = field(default_factory=EncoderConfig.teacher)
    student: EncoderConfig = field(default_factory=EncoderConfig.student)
    code_bits: int = 64
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs_teacher: int = 100
    epochs_student: int = 300
    batch_size: int = 128
    # [[student_layer, teacher_layer], ...] 1-based; empty -> last two of each
    layer_pairs: list[list[int]] = field(default_factory=list)
    window_size: int = 7
    eval: EvalConfig = field(default_factory=EvalConfig)
    plots: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; valid: {list(PRESETS)}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.code_bits < 1:
            raise ConfigError("code_bits must be >= 1")
        for enc in (self.teacher, self.student):
            if enc.image_size != self.data.image_size:
                raise ConfigError(
                    f"encoder image_size {enc.image_size} != data.image_size {self.data.image_size}"
                )
        for split_name in (self.eval.query_split, self.eval.gallery_split):
            if split_name not in ("train", "test"):
                raise ConfigError(f"split roles must be 'train' or 'test', got {split_name!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(_plain(self.to_dict()), sort_keys=False))

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def preset_values(preset: str) -> dict:
    """Nested dict of the values a preset forces."""
    if preset not in _PRESET_TABLE:
        raise ConfigError(f"unknown preset {preset!r}; valid: {list(PRESETS)}")
    entry = dict(_PRESET_TABLE[preset])
    out: dict[str, Any] = {"augment": {"enabled": entry.pop("augment")}}
    if entry:
        out["loss"] = entry
    return out


def valid_keys(cls=ExperimentConfig, prefix: str = "") -> list[str]:
    keys = []
    for f in dataclasses.fields(cls):
        sub = _dataclass_type(cls, f)
        if sub is not None:
            keys.extend(valid_keys(sub, prefix + f.name + "."))
        else:
            keys.append(prefix + f.name)
    return keys


def _dataclass_type(cls, f):
    default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
    return type(default) if dataclasses.is_dataclass(default) else None


def _merge(base: dict, update: dict, cls, path: str = "") -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = dict(base)
    for key, value in update.items():
        if key not in fields:
            raise ConfigError(
                f"unknown config key {path + key!r}; valid keys: {', '.join(valid_keys())}"
            )
        sub = _dataclass_type(cls, fields[key])
        if sub is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"{path + key} must be a mapping")
            out[key] = _merge(out.get(key, {}), value, sub, path + key + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> nested dict, value parsed as YAML scalar/list."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def _build(cls, values: dict):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in values.items():
        sub = _dataclass_type(cls, fields[key])
        kwargs[key] = _build(sub, value) if sub is not None else value
    if cls is EncoderConfig:
        return EncoderConfig(**kwargs)
    return cls(**kwargs)


def build_config(file_values: dict | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    file_values = file_values or {}
    merged: dict = {}
    user = _merge({}, file_values, ExperimentConfig)
    for text in overrides or []:
        user = _merge(user, parse_override(text), ExperimentConfig)
    preset = user.get("preset", ExperimentConfig.__dataclass_fields__["preset"].default)
    merged = _merge(merged, preset_values(preset), ExperimentConfig)
    merged = _merge(merged, user, ExperimentConfig)
    # image size is shared by data and both encoders unless set explicitly per encoder
    size = merged.get("data", {}).get("image_size")
    if size is not None:
        for enc in ("teacher", "student"):
            merged.setdefault(enc, {}).setdefault("image_size", size)
    defaults = {"teacher": EncoderConfig.teacher().to_dict(), "student": EncoderConfig.student().to_dict()}
    for enc in ("teacher", "student"):
        if enc in merged:
            base = {k: v for k, v in defaults[enc].items()
                    if k in ("hidden_dim", "num_layers", "patch_size", "image_size", "in_channels")}
            # derived widths are recomputed from the effective hidden_dim / depth
            merged[enc] = {**base, **merged[enc]}
    return _build(ExperimentConfig, merged)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        text = Path(path).read_text()
        values = yaml.safe_load(text) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(values, overrides)
