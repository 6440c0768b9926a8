"""Run configuration: architecture, training protocol and loss weights.

Serialized as one flat JSON object whose keys are the dataclass field
names; unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass
class ModelConfig:
    hidden_dim: int = 256
    cell_dim: int = 64
    stem_channels: int = 16
    encoder_widths: list[int] = field(default_factory=lambda: [8, 16])
    mlp_hidden: int = 128
    crop_size: int = 24
    dilation_radius: int = 2
    wavelet_levels: int = 2
    use_wcg: bool = True
    use_aggr_rwkv: bool = True
    use_cross_attention: bool = True
    dtype: str = "float32"


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.1
    lambda3: float = 0.5
    lambda_sub: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    use_l_diff: bool = True
    use_l_wavelet: bool = True
    use_l_aggr: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        if self.use_l_diff and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when the pairwise difference loss is enabled")


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    _SECTIONS = ("model", "train", "loss")

    def to_dict(self) -> dict:
        out: dict = {}
        for sec in self._SECTIONS:
            out.update(asdict(getattr(self, sec)))
        return out

    @classmethod
    def from_dict(cls, data: dict) -> Config:
        cfg = cls()
        return cfg.updated(data)

    def updated(self, data: dict) -> Config:
        owners = {f.name: sec for sec in self._SECTIONS for f in fields(getattr(self, sec))}
        unknown = sorted(set(data) - set(owners))
        if unknown:
            raise KeyError(f"unknown config keys: {unknown}")
        parts = {sec: asdict(getattr(self, sec)) for sec in self._SECTIONS}
        for key, value in data.items():
            parts[owners[key]][key] = value
        return Config(ModelConfig(**parts["model"]), TrainConfig(**parts["train"]), LossWeights(**parts["loss"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> Config:
        return cls.from_dict(json.loads(Path(path).read_text()))
