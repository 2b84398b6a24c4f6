"""Pipeline configuration: one JSON document mirroring ``TrainingConfig``.

Example::

    {
      "lr0": 0.001, "epochs": 70, "train_batch": 8, "seed": 0,
      "data_root": "FloodNet-Supervised_v1.0",
      "loss": {"gamma": 4.0, "w": 0.5, "epsilon": 1e-05, "alpha": [...], "beta": null},
      "model": {"variant": "unet_fused", "backbone": {"kind": "pretrained_vit_s14"}}
    }

Keys omitted fall back to the dataclass defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbones import BackboneSpec
from .data import AugmentationConfig, DatasetLayout
from .errors import ContractError
from .losses import LossConfig
from .models import ModelConfig

OPTIMIZERS = ("adam",)


@dataclass
class TrainingConfig:
    lr0: float = 1e-3
    plateau_factor: float = 0.75
    plateau_patience: int = 5
    epochs: int = 70
    train_batch: int = 8
    eval_batch: int = 16
    optimizer: str = "adam"
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: bool = True
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    checkpoint_dir: str = "checkpoints"
    data_root: str | None = None
    layout: DatasetLayout = field(default_factory=DatasetLayout)
    workers: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ContractError("lr0 must be > 0")
        if not 0 < self.plateau_factor < 1:
            raise ContractError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ContractError("plateau_patience must be >= 1")
        if self.epochs < 0 or self.train_batch < 1 or self.eval_batch < 1:
            raise ContractError("epochs must be >= 0 and batch sizes >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return from_dict(cls, d)


_NESTED = {
    "loss": LossConfig,
    "model": ModelConfig,
    "augmentation": AugmentationConfig,
    "layout": DatasetLayout,
    "backbone": BackboneSpec,
}


def to_dict(obj) -> dict:
    def convert(v):
        if dataclasses.is_dataclass(v):
            return {f.name: convert(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (tuple, list)):
            return [convert(x) for x in v]
        return v
    return convert(obj)


def from_dict(cls, d: dict):
    """Build ``cls`` from a (possibly partial) nested dict, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ContractError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ContractError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        if k in _NESTED and isinstance(v, dict):
            v = from_dict(_NESTED[k], v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ContractError(str(e)) from e


def load_config(path) -> TrainingConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ContractError(f"malformed config {path}: {e}") from e
    return TrainingConfig.from_dict(data)


def save_config(cfg: TrainingConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
