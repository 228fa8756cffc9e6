"""Run configuration: defaults, config-file parsing, environment overrides.

Config files are plain ``key = value`` lines (# comments allowed). Every
field can also be overridden by an environment variable named
``SLOTGROUND_<FIELD>`` (upper-case) and by CLI flags; precedence is
defaults < file < environment < explicit flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

ENV_PREFIX = "SLOTGROUND_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    corpus: str = "data/synthetic"
    out_dir: str = "runs/run"
    mode: str = "nsi"  # nsi | hmc | bbox

    # model dimensions
    num_slots: int = 6
    slot_dim: int = 32
    proj_dim: int = 16
    schema_layers: int = 2
    schema_heads: int = 4
    sa_iters: int = 3
    prop_embed_dim: int = 16
    decoder_hidden: int = 64
    head_hidden: int = 64
    fusion_hidden: int = 64
    max_schema_len: int = 8
    use_schema_pos: bool = True

    # objective
    beta_contrastive: float = 0.5
    beta_recon: float = 0.5
    temperature: float = 0.1

    # optimization
    batch_size: int = 32
    steps: int = 3000
    peak_lr: float = 4e-4
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    dropout: float = 0.1
    seed: int = 0
    annotation_fraction: float = 1.0
    eval_every: int = 100

    def validate(self) -> "RunConfig":
        if self.mode not in ("nsi", "hmc", "bbox"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for contrastive training")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.beta_contrastive < 0 or self.beta_recon < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 < self.annotation_fraction <= 1.0:
            raise ConfigError("annotation_fraction must be in (0, 1]")
        if self.steps < 1 or self.warmup_steps < 1:
            raise ConfigError("steps and warmup_steps must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        return self


def _coerce(name: str, kind: type, raw: str):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as e:
        raise ConfigError(f"{name}: {e}") from e


def read_config_file(path) -> dict:
    """Parse a ``key = value`` file into raw string values."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.split("#", 1)[0].strip()
    return values


def build_config(file_path=None, overrides: dict | None = None, env: dict | None = None) -> RunConfig:
    """Layer defaults, config file, environment, and explicit overrides."""
    env = os.environ if env is None else env
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {name: (bool if t in (bool, "bool") else int if t in (int, "int") else float if t in (float, "float") else str) for name, t in known.items()}

    merged: dict = {}
    if file_path is not None:
        for key, raw in read_config_file(file_path).items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, types[key], raw)
    for name in known:
        env_key = ENV_PREFIX + name.upper()
        if env_key in env:
            merged[name] = _coerce(name, types[name], env[env_key])
    for key, value in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value if not isinstance(value, str) else _coerce(key, types[key], value)
    return RunConfig(**merged).validate()
