"""Run configuration: one JSON document covering data, model and training."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .data.synthetic import SyntheticSpec
from .dino import DinoConfig
from .errors import ConfigError
from .trainer import TrainConfig
from .vit import ViTConfig


@dataclass
class Paths:
    data_dir: str = "data"
    init: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ViTConfig = field(default_factory=ViTConfig)
    pretrain: DinoConfig = field(default_factory=DinoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)

    def to_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        return _build(cls, doc, "")

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(doc)


_NESTED = {"data": SyntheticSpec, "model": ViTConfig, "pretrain": DinoConfig, "train": TrainConfig, "paths": Paths}


def _build(kind, doc, where):
    names = {f.name: f for f in dataclasses.fields(kind)}
    unknown = sorted(set(doc) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, val in doc.items():
        sub = _NESTED.get(key) if kind is RunConfig else None
        if sub is not None:
            if not isinstance(val, dict):
                raise ConfigError(f"{key} must be an object")
            kwargs[key] = _build(sub, val, key)
        else:
            default = names[key].default
            if isinstance(default, tuple) and isinstance(val, list):
                val = tuple(val)
            kwargs[key] = val
    try:
        return kind(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None
