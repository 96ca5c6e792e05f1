"""Declarative run configuration (YAML or JSON) with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .cropper import CropConfig
from .fgm import FgmConfig, FgmError
from .quality_model import QualityModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    n_train: int = 200
    n_test: int = 50
    n_frames: int = 16
    size: int = 32
    spread: float = 0.15


@dataclass
class DataConfig:
    source: str = "manifest"  # or "synthetic"
    manifest: str | None = None
    mos_min: float = 0.0
    mos_max: float = 100.0
    train_split: str = "train"
    eval_split: str = "test"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class LossConfig:
    mode: str = "fcl"  # fcl | mae | bce
    sigma: float | None = None  # None: estimate once from the training split


@dataclass
class TrainConfig:
    epochs: int = 5
    fgm: bool = True
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    seed: int = 0
    model: QualityModelConfig = field(default_factory=QualityModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    fgm: FgmConfig = field(default_factory=lambda: FgmConfig(optimizer="adam"))
    crop: CropConfig = field(default_factory=CropConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if self.loss.mode not in ("fcl", "mae", "bce"):
            raise ConfigError(f"loss.mode must be fcl, mae or bce, got {self.loss.mode!r}")
        if self.data.source not in ("manifest", "synthetic"):
            raise ConfigError(f"data.source must be 'manifest' or 'synthetic', got {self.data.source!r}")
        if self.train.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def _build(default: Any, data: Any, where: str):
    """Overlay ``data`` on the dataclass instance ``default``, recursing into nested sections."""
    label = where or "config"
    if not isinstance(data, dict):
        raise ConfigError(f"{label}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(default)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{label}: unknown key(s) {unknown}")
    updates = {}
    for name, value in data.items():
        current = getattr(default, name)
        if dataclasses.is_dataclass(current):
            updates[name] = _build(current, value, f"{where}.{name}" if where else name)
        else:
            updates[name] = value
    try:
        return dataclasses.replace(default, **updates)
    except (TypeError, ValueError, FgmError) as exc:
        raise ConfigError(f"{label}: {exc}") from None


def config_from_dict(data: dict[str, Any] | None) -> RunConfig:
    return _build(RunConfig(), data or {}, "")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return config_from_dict(data)
