"""Flat pipeline configuration: one TOML file, CLI overrides, and a
stable hash serialized into every artifact for provenance."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class PipelineConfig:
    # geometry / rate
    resolution: int = 64
    factor: int = 4
    latent_channels: int = 4
    delta: float = 1.0
    deltas: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    seed: int = 0
    # diffusion schedule and sampling policy (0 = automatic)
    schedule_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_star: int = 0
    inpaint_t_start: int = 0
    # edge extraction
    canny_sigma: float = 1.4
    canny_low: float = 0.1
    canny_high: float = 0.2
    # channel impairments
    loss_regions: int = 1
    loss_max_frac: float = 0.125
    loss_area_mode: bool = False
    # training hyperparameters
    vae_epochs: int = 40
    vae_batch: int = 16
    vae_lr: float = 1e-3
    vae_beta_kl: float = 1e-6
    vae_base: int = 16
    een_epochs: int = 30
    een_batch: int = 16
    een_lr: float = 2e-4
    een_lambda_l1: float = 1.0
    een_base: int = 32
    cds_epochs: int = 60
    cds_batch: int = 32
    cds_lr: float = 1e-3
    cds_base: int = 32
    cds_cond_dropout: float = 0.1
    # artifacts
    vae_ckpt: str = ""
    een_ckpt: str = ""
    cds_ckpt: str = ""


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def _coerce(name, value, current):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
    if isinstance(current, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected a list of numbers, got {value!r}")
    return str(value)


def load_config(path=None, overrides=None):
    """Build a PipelineConfig from an optional TOML file plus
    key=value overrides. Unknown keys are configuration errors."""
    cfg = PipelineConfig()
    items = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                items.update(tomllib.load(f))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"config file {path} is not valid TOML: {e}")
    if overrides:
        items.update(overrides)
    for name, value in items.items():
        if name not in _FIELDS:
            raise ConfigError(f"unknown config key: {name}")
        setattr(cfg, name, _coerce(name, value, getattr(cfg, name)))
    return cfg


def config_hash(cfg):
    """Stable 16-hex-digit digest of the full configuration."""
    blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
