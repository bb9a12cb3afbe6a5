"""Training configuration, masking presets and the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


MODEL_KINDS = ("glow", "waveletflow")
MASK_SCHEMES = ("channel_wise", "checkerboard", "cycle")

# epochs, batch size, learning rate, weight decay, hidden channels per masking variant
PRESETS = {
    "channel-wise": dict(epochs=1000, batch_size=16, learning_rate=5e-4, weight_decay=1e-3,
                         hidden_channels=256, mask_scheme="channel_wise"),
    "checker": dict(epochs=350, batch_size=8, learning_rate=1e-4, weight_decay=1e-3,
                    hidden_channels=512, mask_scheme="checkerboard"),
    "cycle-1": dict(epochs=500, batch_size=8, learning_rate=1e-4, weight_decay=1e-3,
                    hidden_channels=128, mask_scheme="cycle", cycle_iterations=1),
}


@dataclass
class TrainConfig:
    model_kind: str = "glow"
    epochs: int = 1000
    batch_size: int = 16
    learning_rate: float = 5e-4
    weight_decay: float = 1e-3
    hidden_channels: int = 256
    mask_scheme: str = "channel_wise"
    cycle_iterations: int = 1
    seed: int = 0
    levels: int = 3
    flows_per_level: int = 32
    image_size: int = 64
    channels: int = 3
    grad_clip: float = 50.0
    holdout_fraction: float = 0.2
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        for name in ("batch_size", "hidden_channels", "levels", "flows_per_level",
                     "image_size", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "checkpoint_interval", "cycle_iterations", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("learning_rate and grad_clip must be positive, weight_decay >= 0")
        if self.mask_scheme not in MASK_SCHEMES:
            raise ConfigError(f"mask_scheme must be one of {MASK_SCHEMES}, got {self.mask_scheme!r}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw.strip().strip('"').strip("'")


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


def resolve_config(file_values: dict | None = None, preset: str | None = None,
                   overrides: dict | None = None) -> TrainConfig:
    """Layer defaults < preset < config file < explicit overrides."""
    values: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    values.update(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**values)
