"""Run configuration: one JSON document with a section per component.

Every section maps onto a dataclass; unknown keys are rejected. Missing keys
take the dataclass defaults.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

from .backbones import BackboneConfig
from .data import SynthConfig
from .linking import LinkConfig
from .losses import LossConfig
from .model import ModelConfig
from .postprocess import NmsConfig
from .train import TrainConfig

__all__ = ["LfbConfig", "RunConfig", "ConfigError", "from_dict", "load_config"]


class ConfigError(ValueError):
    pass


@dataclass
class LfbConfig:
    clip_len: int = 8
    window: int = 8


@dataclass
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: Dict[str, Any] = field(default_factory=dict)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    nms: NmsConfig = field(default_factory=NmsConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    lfb: LfbConfig = field(default_factory=LfbConfig)

    def model_config(self) -> ModelConfig:
        bc = dataclasses.replace(self.backbone, clip_len=self.train.clip_len)
        opts = dict(self.model)
        opts.setdefault("num_classes", len(self.data.classes))
        opts.setdefault("ablation", self.train.ablation)
        opts.setdefault("seed", self.train.seed)
        opts.setdefault("pose_classes", self.loss.pose_classes)
        return from_dict(ModelConfig, {**opts, "backbone": bc}, "model")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"backbone"}


def from_dict(cls, data, where: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting keys it does not declare."""
    if dataclasses.is_dataclass(data) and isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        target = _DATACLASSES.get(ftype if isinstance(ftype, str) else getattr(ftype, "__name__", ""))
        if target is not None and isinstance(value, dict):
            value = from_dict(target, value, f"{where}.{name}" if where else name)
        elif name == "model" and cls is RunConfig:
            unknown = set(value) - _MODEL_KEYS
            if unknown:
                raise ConfigError(f"model: unknown keys {sorted(unknown)}")
        elif isinstance(value, list) and name == "object_size":
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from None


_DATACLASSES = {c.__name__: c for c in (SynthConfig, BackboneConfig, LossConfig, TrainConfig, NmsConfig,
                                         LinkConfig, LfbConfig)}


def load_config(path=None, overrides: dict = None) -> RunConfig:
    data = {} if path is None else json.loads(Path(path).read_text())
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        data.setdefault(section, {})[key] = value
    return from_dict(RunConfig, data)
