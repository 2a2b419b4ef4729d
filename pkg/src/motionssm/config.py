"""Run configuration: one flat dataclass, preset bundles, key=value files.

Config files are flat `key = value` text; every key must name a RunConfig
field and every field is validated on load. Unknown keys are fatal.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

from .data import NUM_CHANNELS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # architecture
    d_motion: int = 263
    d_model: int = 256
    n_blocks: int = 4
    stride: int = 8
    groupnorm_groups: int = 16
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    scan_mode: str = "mirror"
    vocab: int = 8
    # diffusion
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 1e-2
    # guidance
    guidance_scale: float = 4.0
    cond_dropout: float = 0.2
    # optimization
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 1e-2
    batch_size: int = 256
    epochs: int = 3000
    # corpus
    train_count: int = 1600
    valid_count: int = 200
    test_count: int = 200
    min_len: int = 16
    max_len: int = 64
    # sampling
    sample_steps: int = 10
    sampler: str = "ddim"
    # bookkeeping
    seed: int = 0
    checked: bool = False

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def dt_rank(self) -> int:
        return math.ceil(self.d_model / 16)

    def validate(self) -> "RunConfig":
        positive = ("d_motion", "d_model", "n_blocks", "stride", "groupnorm_groups",
                    "d_state", "d_conv", "expand", "vocab", "timesteps", "batch_size",
                    "epochs", "train_count", "valid_count", "test_count", "min_len",
                    "max_len", "sample_steps")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.groupnorm_groups:
            raise ConfigError(f"d_model {self.d_model} not divisible by "
                              f"groupnorm_groups {self.groupnorm_groups}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for the sinusoidal step encoding")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ConfigError(f"need 0 < beta_start < beta_end < 1, got "
                              f"({self.beta_start}, {self.beta_end})")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ConfigError(f"cond_dropout must be in [0, 1], got {self.cond_dropout}")
        if self.scan_mode not in ("forward", "bidir", "mirror"):
            raise ConfigError(f"scan_mode must be forward|bidir|mirror, got {self.scan_mode!r}")
        if self.sampler not in ("ddpm", "ddim"):
            raise ConfigError(f"sampler must be ddpm|ddim, got {self.sampler!r}")
        if not 1 <= self.sample_steps <= self.timesteps:
            raise ConfigError(f"sample_steps must be in [1, {self.timesteps}]")
        if self.min_len > self.max_len:
            raise ConfigError(f"min_len {self.min_len} > max_len {self.max_len}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _parse_value(raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse {raw!r} as bool")
    try:
        return target_type(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {target_type.__name__}") from None


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def config_from_dict(values: dict) -> RunConfig:
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**values)
    return cfg.validate()


def load_config_file(path) -> RunConfig:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(raw, _TYPES[_FIELD_TYPES[key]])
    return config_from_dict(values)


def desk_config(**overrides) -> RunConfig:
    base = dict(d_motion=NUM_CHANNELS, d_model=64, n_blocks=2, timesteps=100,
                batch_size=32, epochs=60, lr=2e-4)
    base.update(overrides)
    return config_from_dict(base)


def full_config(**overrides) -> RunConfig:
    return config_from_dict(overrides)


PRESETS = {"desk": desk_config, "full": full_config, "paper": full_config}


def resolve_config(name_or_path: str) -> RunConfig:
    """Accept a preset name (desk, full, paper) or a key=value file path."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]()
    path = Path(name_or_path)
    if path.exists():
        return load_config_file(path)
    raise ConfigError(f"{name_or_path!r} is neither a preset "
                      f"({', '.join(sorted(PRESETS))}) nor a config file")
