"""Run configuration: JSON in, validated dataclass out.

Unknown keys are rejected so typos fail loudly; every violation names the
offending field.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class RunConfig:
    block_size: int = 32
    ratio: float = 0.1
    channels: int = 32
    iterations: int = 10
    ffb_expansion: int = 4
    epochs: int = 10
    warmup_epochs: int = 3
    lr_max: float = 5e-4
    lr_min: float = 5e-5
    batch_size: int = 16
    patch_size: int = 96
    patches_per_epoch: int = 500
    seed: int = 0
    augment: bool = True
    inertial_attention: bool = True

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            try:
                if f.type == "int":
                    if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                        raise TypeError
                    coerced[f.name] = int(value)
                elif f.type == "float":
                    if isinstance(value, bool):
                        raise TypeError
                    coerced[f.name] = float(value)
                elif f.type == "bool":
                    if not isinstance(value, bool):
                        raise TypeError
                    coerced[f.name] = value
                else:  # pragma: no cover - all fields are int/float/bool
                    coerced[f.name] = value
            except (TypeError, ValueError):
                raise ConfigurationError(f"config field '{f.name}': expected {f.type}, got {value!r}") from None
        cfg = cls(**coerced)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: Path | str) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        positive_ints = (
            "block_size", "channels", "iterations", "ffb_expansion",
            "epochs", "batch_size", "patch_size", "patches_per_epoch",
        )
        for name in positive_ints:
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"config field '{name}': must be a positive integer, got {value!r}")
        if not (0.0 < self.ratio <= 1.0):
            raise ConfigurationError(f"config field 'ratio': must lie in (0, 1], got {self.ratio}")
        if self.channels < 2:
            raise ConfigurationError(f"config field 'channels': must be >= 2, got {self.channels}")
        if self.warmup_epochs < 0:
            raise ConfigurationError(f"config field 'warmup_epochs': must be >= 0, got {self.warmup_epochs}")
        if self.warmup_epochs > self.epochs:
            raise ConfigurationError(
                f"config field 'warmup_epochs': {self.warmup_epochs} exceeds epochs {self.epochs}"
            )
        if self.lr_max <= 0 or self.lr_min < 0:
            raise ConfigurationError("config fields 'lr_max'/'lr_min': need lr_max > 0 and lr_min >= 0")
        if self.lr_min > self.lr_max:
            raise ConfigurationError(
                f"config field 'lr_min': {self.lr_min} exceeds lr_max {self.lr_max}"
            )
        if self.patch_size % self.block_size != 0:
            raise ConfigurationError(
                f"config field 'patch_size': {self.patch_size} not divisible by block_size {self.block_size}"
            )
        if self.seed < 0:
            raise ConfigurationError(f"config field 'seed': must be >= 0, got {self.seed}")


def build_model(config: RunConfig):
    """Construct the trainable model described by a config."""
    from .model import ReconstructionModel

    return ReconstructionModel.build(
        block_size=config.block_size,
        ratio=config.ratio,
        channels=config.channels,
        iterations=config.iterations,
        ffb_expansion=config.ffb_expansion,
        inertial_attention=config.inertial_attention,
        seed=config.seed,
    )
