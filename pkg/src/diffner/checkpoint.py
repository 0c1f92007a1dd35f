"""Versioned checkpoint container: parameters, configuration and label vocabulary."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

from .denoiser import BoundaryDenoiser, ModelConfig
from .errors import ValidationError

FORMAT_VERSION = 1


def save_checkpoint(path, model: BoundaryDenoiser, train_config: dict, labels, extra: dict | None = None) -> Path:
    """Atomically write ``path`` (temporary file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config,
        "labels": list(labels),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> tuple[BoundaryDenoiser, dict]:
    """Rebuild the model; returns ``(model, payload)`` with the model in eval mode."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (FileNotFoundError, IsADirectoryError):
        raise
    except Exception as exc:
        raise ValidationError(f"{path}: not a readable checkpoint ({exc})") from exc
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version!r} (expected {FORMAT_VERSION})")
    config = ModelConfig(**payload["model_config"])
    model = BoundaryDenoiser(config)
    state = payload["state_dict"]
    own = model.state_dict()
    for key, value in own.items():
        if key not in state:
            raise ValidationError(f"{path}: missing parameter {key}")
        if tuple(state[key].shape) != tuple(value.shape):
            raise ValidationError(f"{path}: shape mismatch for {key}: {tuple(state[key].shape)} vs {tuple(value.shape)}")
    unexpected = set(state) - set(own)
    if unexpected:
        raise ValidationError(f"{path}: unexpected parameters {sorted(unexpected)[:5]}")
    model.load_state_dict(state)
    model.to(state[next(iter(state))].dtype)
    model.eval()
    return model, payload
