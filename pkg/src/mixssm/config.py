"""Run configuration files: model fields plus training fields, as JSON.

Unknown keys are rejected, every field has a documented default, and
parse -> emit -> parse is the identity.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError
from .network import ModelConfig, config_from_dict, config_to_dict

__all__ = ["RunConfig", "parse_config", "emit_config", "load_config_file"]


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    epochs: int = 10
    batch_size: int = 32
    lr: float = 5e-5
    train_data: str | None = None
    eval_data: str | None = None

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")


_TRAIN_FIELDS = ("epochs", "batch_size", "lr", "train_data", "eval_data")


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(data) - model_keys - set(_TRAIN_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = config_from_dict({k: v for k, v in data.items() if k in model_keys})
    run = RunConfig(model=model, **{k: data[k] for k in _TRAIN_FIELDS if k in data})
    run.validate()
    return run


def emit_config(config: RunConfig) -> str:
    """Canonical textual form; stable field order and formatting."""
    payload = dict(config_to_dict(config.model))
    payload.update(
        epochs=config.epochs,
        batch_size=config.batch_size,
        lr=config.lr,
        train_data=config.train_data,
        eval_data=config.eval_data,
    )
    return json.dumps(payload, indent=2) + "\n"


def load_config_file(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
