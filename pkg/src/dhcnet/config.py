"""Experiment configuration and its JSON encoding."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List

from .backbone import BackboneConfig
from .losses import LossWeights


@dataclass
class TrainConfig:
    dataset: str = "data"
    seed: int = 0
    image_size: int = 64
    # augmentation geometry
    sigma: float = 0.25
    m: int = 3
    independent_regions: bool = False
    samples_per_bin: int = 2
    # objective
    alpha: float = 2.0
    beta: float = 1.0
    gamma: float = 0.6
    enable_hcl: bool = True
    enable_hce: bool = True
    hce_mode: str = "online"
    hcl_loss: str = "hor"
    hce_loss: str = "exp"
    ordering_mode: str = "hinge"
    mixup_baseline: bool = False
    mixup_alpha: float = 1.0
    # optimizer
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 5
    epochs: int = 60
    batch_size: int = 8
    hflip: bool = True
    # backbone
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: int = 2
    stage_norm: bool = True

    _CHOICES = {
        "hce_mode": ("online", "frozen"),
        "hcl_loss": ("hor", "ce"),
        "hce_loss": ("exp", "ce"),
        "ordering_mode": ("hinge", "raw"),
    }

    def validate(self) -> "TrainConfig":
        for key, choices in self._CHOICES.items():
            if getattr(self, key) not in choices:
                raise ValueError(f"{key} must be one of {choices}, got {getattr(self, key)!r}")
        LossWeights(self.alpha, self.beta, self.gamma)
        if not 0 < self.sigma <= 1:
            raise ValueError(f"sigma must lie in (0, 1], got {self.sigma}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ValueError("epochs, batch_size and lr_decay_every must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        return self

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    def backbone(self, num_classes: int) -> BackboneConfig:
        return BackboneConfig(num_classes=num_classes, input_size=self.image_size,
                              stage_channels=list(self.stage_channels),
                              blocks_per_stage=self.blocks_per_stage, seed=self.seed,
                              stage_norm=self.stage_norm)

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 0-based ``epoch``."""
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: coerce(known[k], v) for k, v in d.items()}).validate()

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def field_kind(f: dataclasses.Field) -> str:
    default = f.default_factory() if f.default is dataclasses.MISSING else f.default
    if isinstance(default, bool):
        return "bool"
    if isinstance(default, int):
        return "int"
    if isinstance(default, float):
        return "float"
    if isinstance(default, list):
        return "int_list"
    return "str"


def parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def coerce(f: dataclasses.Field, value):
    kind = field_kind(f)
    if kind == "bool":
        return parse_bool(value)
    if kind == "int":
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{f.name} must be an integer, got {value}")
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "int_list":
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split()]
        return [int(v) for v in value]
    return str(value)
