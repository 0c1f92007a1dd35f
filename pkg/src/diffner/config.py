"""Run configuration: one flat record read from YAML, overridable per flag."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from .corpus import EXPANSION_STRATEGIES
from .errors import ConfigurationError, ValidationError
from .matching import BOUNDARY_LOSSES
from .sampler import SamplerConfig
from .schedule import SCHEDULE_KINDS


@dataclass
class TrainConfig:
    # diffusion
    num_spans: int = 60  # K
    timesteps: int = 1000  # T
    scheduler: str = "cosine"
    scale_factor: float = 1.0  # lambda
    expansion: str = "random"
    # optimisation
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    lr_warmup: float = 0.1
    batch_size: int = 16
    epochs: int = 18
    freeze_epochs: int = 0
    grad_clip: float = 1.0
    no_entity_weight: float = 0.02
    boundary_loss: str = "bernoulli"
    on_overflow: str = "error"  # "error" or "skip" when a sentence has more than K entities
    concat_dev: bool = False
    # network
    hidden_size: int = 48
    encoder_width: int = 256
    encoder_layers: int = 3
    encoder_ffn: int = 4
    decoder_ffn: int = 1
    heads: int = 4
    dropout: float = 0.0
    pointer_activation: str = "relu"
    # inference
    eval_spans: int = 60  # K_eval
    sampling_steps: int = 5  # gamma
    threshold: float = 2.5  # phi
    eval_batch_size: int = 512
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.scheduler not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown scheduler {self.scheduler!r}")
        if self.expansion not in EXPANSION_STRATEGIES:
            raise ConfigurationError(f"unknown expansion strategy {self.expansion!r}")
        if self.boundary_loss not in BOUNDARY_LOSSES:
            raise ConfigurationError(f"unknown boundary loss {self.boundary_loss!r}")
        if self.on_overflow not in ("error", "skip"):
            raise ConfigurationError(f"on_overflow must be 'error' or 'skip', got {self.on_overflow!r}")
        positive = ("num_spans", "timesteps", "batch_size", "hidden_size", "encoder_width", "heads",
                    "eval_spans", "sampling_steps", "eval_batch_size")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "freeze_epochs", "encoder_layers"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if not self.scale_factor > 0:
            raise ValidationError("scale_factor must be positive")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 <= self.lr_warmup < 1.0:
            raise ValidationError(f"lr_warmup must lie in [0, 1), got {self.lr_warmup}")
        if self.weight_decay < 0 or self.grad_clip < 0 or self.no_entity_weight < 0:
            raise ValidationError("weight_decay, grad_clip and no_entity_weight must be non-negative")
        if not 0.0 <= self.threshold <= 3.0:
            raise ValidationError(f"threshold must lie in [0, 3], got {self.threshold}")
        if self.sampling_steps > self.timesteps:
            raise ValidationError("sampling_steps cannot exceed timesteps")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        values = {}
        for key, value in data.items():
            default = known[key].default
            try:
                if isinstance(default, bool):
                    value = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
                elif isinstance(default, (int, float, str)):
                    value = type(default)(value)
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"bad value for {key}: {value!r}") from exc
            values[key] = value
        return cls(**values).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **overrides) -> "TrainConfig":
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_dict(data)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(k_eval=self.eval_spans, gamma=self.sampling_steps, phi=self.threshold, seed=self.seed)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def load_config(path=None, **overrides) -> TrainConfig:
    data = {}
    if path is not None:
        try:
            with open(Path(path), encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected a mapping of configuration keys")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def dump_config(cfg: TrainConfig, path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
