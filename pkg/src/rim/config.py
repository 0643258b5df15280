"""Strict JSON experiment configuration for the command line tools.

Example::

    {
      "model": {"kind": "rim", "widths": [16, 64, 16]},
      "train": {"steps": 10, "tasks": ["denoise:sigma=0.0980392"], "updates": 3000},
      "data": {"train_dir": "corpus/train", "val_dir": "corpus/val", "patch_size": 16},
      "output_dir": "runs/denoise",
      "seed": 0
    }

Relative paths resolve against the directory holding the config file.
The top-level ``seed`` drives both initialization and training; the
``train`` section may not carry its own.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .models import RimConfig
from .training import TrainConfig

__all__ = ["DataConfig", "ExperimentConfig", "ConfigError"]

_TOP_KEYS = {"model", "train", "data", "output_dir", "seed"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_dir: str
    val_dir: str | None = None
    patch_size: int = 16
    train_stride: int = 4
    val_stride: int = 8

    def __post_init__(self):
        if self.patch_size < 1 or self.train_stride < 1 or self.val_stride < 1:
            raise ConfigError("patch_size and strides must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        if "train_dir" not in d:
            raise ConfigError("data.train_dir is required")
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    model: RimConfig
    train: TrainConfig
    data: DataConfig
    output_dir: str
    seed: int = 0
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        del train["seed"]
        return {
            "model": self.model.to_dict(),
            "train": train,
            "data": asdict(self.data),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("model", "train", "data", "output_dir"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        train = dict(d["train"])
        if "seed" in train:
            raise ConfigError("set the seed at the top level, not inside 'train'")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        try:
            model = RimConfig.from_dict(d["model"])
            train_cfg = TrainConfig.from_dict({**train, "seed": seed})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(model, train_cfg, DataConfig.from_dict(d["data"]), str(d["output_dir"]), seed, Path(base_dir))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, base_dir=path.parent)
