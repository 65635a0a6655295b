"""
Run configuration: flat `key = value` text with `#` comments.
Parsing goes through python-dotenv; validation through pydantic.
"""
import os
from io import StringIO
from pathlib import Path

from dotenv import dotenv_values
from pydantic import Field, ValidationError, field_validator, model_validator

from models.d3net import NetworkConfig
from models.degradations import KINDS
from models.errors import ConfigError

SEED_ENV = "D3NET_SEED"


class RunConfig(NetworkConfig):
    total_steps: int = Field(500, ge=0)
    batch_size: int = Field(8, ge=1)
    patch_size: int = Field(32, ge=8)
    lr_init: float = Field(1e-4, gt=0)
    lr_final: float = Field(1e-6, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    train_manifest: str = ""
    train_kinds: str = "gaussian_noise"
    noise_sigma: float = Field(25.0, ge=0, le=255)

    @field_validator("train_kinds")
    @classmethod
    def _known_kinds(cls, value):
        kinds = [k.strip() for k in value.split(",") if k.strip()]
        unknown = [k for k in kinds if k not in KINDS]
        if not kinds or unknown:
            raise ValueError(f"train_kinds must list kinds from {list(KINDS)}, got {value!r}")
        return ",".join(kinds)

    @model_validator(mode="after")
    def _aligned_patches(self):
        if self.patch_size % self.multiple:
            raise ValueError(f"patch_size {self.patch_size} must be a multiple of {self.multiple}")
        return self

    @property
    def kinds(self):
        return self.train_kinds.split(",")


def _validated(values):
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def parse_config(text):
    values = dotenv_values(stream=StringIO(text), interpolate=False)
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigError(f"config lines without '=': {missing}")
    return _validated(values)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def emit_config(cfg):
    """ One `key = value` line per field, in declaration order """
    return "".join(f"{name} = {_format(getattr(cfg, name))}\n" for name in type(cfg).model_fields)


def apply_env(cfg, environ=None):
    """ D3NET_SEED, when set, replaces the configured seed """
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    return _validated({**cfg.model_dump(), "seed": seed})


def load_config(path=None, environ=None, **overrides):
    """ Defaults, then the config file, then explicit overrides, then D3NET_SEED """
    cfg = parse_config(Path(path).read_text()) if path else RunConfig()
    if overrides:
        cfg = _validated({**cfg.model_dump(), **{k: v for k, v in overrides.items() if v is not None}})
    return apply_env(cfg, environ)
