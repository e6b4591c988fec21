"""Run configuration: YAML schema, per-task defaults, seed derivation.

Top-level keys mirror the pipeline stages. Loss weights left unset are
filled from the per-task table below when the config is parsed.
"""

from __future__ import annotations

import zlib
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import TASKS
from .errors import ConfigError

# alpha, beta, gamma, mu, lambda per translation task
TASK_DEFAULTS = {
    "H&E2MAS": {"alpha": 30.0, "beta": 0.1, "gamma": 0.1, "mu": 0.05, "lam": 0.001},
    "H&E2PAS": {"alpha": 50.0, "beta": 0.1, "gamma": 0.1, "mu": 0.55, "lam": 0.001},
    "H&E2PASM": {"alpha": 30.0, "beta": 0.1, "gamma": 0.1, "mu": 0.8, "lam": 0.05},
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class EncoderConfig(_Section):
    kind: Literal["toy", "pretrained"] = "toy"
    dim: int = Field(512, ge=1)
    seed: int = 7
    weights_path: Optional[str] = None


class PromptConfig(_Section):
    n_tokens: int = Field(16, ge=1)
    init_std: float = Field(0.02, gt=0)
    steps: int = Field(200, ge=0)
    lr: float = Field(1e-3, gt=0)


class VPGANConfig(_Section):
    alpha: Optional[float] = Field(None, ge=0)
    beta: Optional[float] = Field(None, ge=0)
    gamma: Optional[float] = Field(None, ge=0)
    nu: float = Field(10.0, ge=0)
    iterations: int = Field(200, ge=1)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(2e-4, gt=0)
    betas: tuple[float, float] = (0.5, 0.999)
    ngf: int = Field(16, ge=8)
    n_blocks: int = Field(3, ge=0)
    ndf: int = Field(16, ge=1)
    eval_size: int = Field(32, ge=1)
    checkpoint_every: int = Field(0, ge=0)


class ICRConfig(_Section):
    softmax_on: Literal["exp_cos", "cos"] = "exp_cos"


class DiffusionConfig(_Section):
    train_steps: int = Field(1000, ge=1)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)
    steps: int = Field(50, ge=1)
    iterations: int = Field(600, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(2e-3, gt=0)
    channels: int = Field(16, ge=8)
    crop: Optional[int] = Field(32, ge=8)
    cond_dropout: float = Field(0.1, ge=0, le=1)


class HarborConfig(_Section):
    mu: Optional[float] = Field(None, ge=0, le=1)
    lam: Optional[float] = Field(None, ge=0, alias="lambda")
    delta: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 1.0)
    steps: int = Field(50, ge=0)
    step_size: float = Field(0.1, gt=0)
    reading: Literal["literal", "residual"] = "literal"

    @field_validator("delta")
    @classmethod
    def _nonneg(cls, v):
        if any(d < 0 for d in v):
            raise ValueError("level weights must be >= 0")
        return v


class StructConfig(_Section):
    comparand: Literal["z", "y_plus_z"] = "z"


class TilingConfig(_Section):
    patch_size: int = Field(256, ge=1)
    overlap: int = Field(192, ge=0)


class FilterConfig(_Section):
    sat_threshold: float = Field(15.0, ge=0)
    stat: Literal["mean", "max", "median"] = "mean"


class SynthConfig(_Section):
    count: int = Field(100, ge=2)
    size: int = Field(64, ge=32)
    test_fraction: float = Field(0.2, ge=0, lt=1)


class PathsConfig(_Section):
    data_dir: str = "data"
    out_dir: str = "runs"


class RunConfig(_Section):
    task: Literal["H&E2MAS", "H&E2PAS", "H&E2PASM"] = "H&E2MAS"
    seed: int = 0
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    prompts: PromptConfig = Field(default_factory=PromptConfig)
    vpgan: VPGANConfig = Field(default_factory=VPGANConfig)
    icr: ICRConfig = Field(default_factory=ICRConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    harbor: HarborConfig = Field(default_factory=HarborConfig)
    struct: StructConfig = Field(default_factory=StructConfig)
    tiling: TilingConfig = Field(default_factory=TilingConfig)
    filter: FilterConfig = Field(default_factory=FilterConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def _fill_task_defaults(self):
        d = TASK_DEFAULTS[self.task]
        for name in ("alpha", "beta", "gamma"):
            if getattr(self.vpgan, name) is None:
                setattr(self.vpgan, name, d[name])
        if self.harbor.mu is None:
            self.harbor.mu = d["mu"]
        if self.harbor.lam is None:
            self.harbor.lam = d["lam"]
        if self.tiling.overlap >= self.tiling.patch_size:
            raise ValueError("tiling.overlap must be smaller than tiling.patch_size")
        if self.diffusion.train_steps % self.diffusion.steps:
            raise ValueError("diffusion.train_steps must be a multiple of diffusion.steps")
        return self

    @property
    def source(self) -> str:
        return TASKS[self.task][0]

    @property
    def target(self) -> str:
        return TASKS[self.task][1]


def _key_path(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def validate_config(data: dict) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(err["msg"], _key_path(err["loc"])) from None


def parse_config(path) -> RunConfig:
    """Load and validate a YAML run config."""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return validate_config(data)


def config_dict(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json", by_alias=True)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_dict(cfg), sort_keys=True)


def derive_seed(master: int, stage: str) -> int:
    """Stable 31-bit per-stage seed from the master seed and a stage name."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, zlib.crc32(stage.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0] & 0x7FFFFFFF)
