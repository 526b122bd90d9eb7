"""
Run configuration: a strict JSON document validated with pydantic, plus the
environment knobs read from `.env`.
"""
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.errors import ConfigError
from src.synth_data import L_TEXT

load_dotenv()

logger = logging.getLogger(__name__)

DIFFUSION_STEPS = 1000


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    n: int = Field(4096, ge=1)
    seed: int = Field(0, ge=0)
    hr_res: int = Field(32, ge=8)
    scale: int = Field(4, ge=1)
    heldout_n: int = Field(64, ge=1)
    heldout_seed: int = Field(1, ge=0)


class VqConfig(_Section):
    K: int = Field(64, ge=2)
    d_tok: int = Field(16, ge=1)
    g: int = Field(8, ge=1)
    epochs: int = Field(20, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch: int = Field(64, ge=1)
    beta: float = Field(0.25, ge=0)
    blocks: int = Field(2, ge=0)
    heads: int = Field(2, ge=1)
    restart_dead_codes: bool = True
    token_mode: Literal["discrete", "continuous"] = "discrete"


class ModelConfig(_Section):
    d_model: int = Field(64, ge=1)
    n_latents: int = Field(32, ge=1)
    mmlc_self_blocks: int = Field(2, ge=0)
    denoiser_blocks: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    use_mmlc: bool = True


class TrainConfig(_Section):
    steps: int = Field(50000, ge=1)
    batch: int = Field(32, ge=1)
    lr: float = Field(1e-4, gt=0)
    drop_p: float = Field(0.1, ge=0, le=1)
    joint_drop_p: float = Field(0.05, ge=0, le=1)
    seed: int = Field(0, ge=0)
    log_every: int = Field(100, ge=1)


class TempsConfig(_Section):
    depth: float = Field(1.0, ge=0.4, le=10.0)
    seg: float = Field(1.0, ge=0.4, le=10.0)
    edge: float = Field(1.0, ge=0.4, le=10.0)
    text: float = Field(1.0, ge=0.4, le=10.0)


class SampleConfig(_Section):
    mode: Literal["cfg", "mnull-cfg", "m∅-cfg", "m-cfg"] = "m-cfg"
    w: float = Field(4.0, ge=0)
    steps: int = Field(50, ge=1, le=DIFFUSION_STEPS)
    temps: TempsConfig = Field(default_factory=TempsConfig)
    seed: int = Field(0, ge=0)


class RunConfig(_Section):
    data: DataConfig = Field(default_factory=DataConfig)
    vq: VqConfig = Field(default_factory=VqConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sample: SampleConfig = Field(default_factory=SampleConfig)

    @model_validator(mode="after")
    def _check_dimensions(self) -> "RunConfig":
        if self.data.hr_res % self.data.scale:
            raise ValueError(f"data.hr_res ({self.data.hr_res}) must be divisible by data.scale ({self.data.scale})")
        if self.data.hr_res != 4 * self.vq.g:
            raise ValueError(f"data.hr_res ({self.data.hr_res}) must equal 4 * vq.g ({4 * self.vq.g})")
        if self.vq.d_tok % self.vq.heads:
            raise ValueError(f"vq.heads ({self.vq.heads}) must divide vq.d_tok ({self.vq.d_tok})")
        if self.vq.d_tok > self.model.d_model:
            raise ValueError(f"vq.d_tok ({self.vq.d_tok}) exceeds model.d_model ({self.model.d_model})")
        if self.model.d_model % self.model.heads:
            raise ValueError(f"model.heads ({self.model.heads}) must divide model.d_model ({self.model.d_model})")
        if self.model.n_latents >= self.sequence_length:
            raise ValueError(
                f"model.n_latents ({self.model.n_latents}) must be smaller than the sequence length M={self.sequence_length}"
            )
        return self

    @property
    def sequence_length(self) -> int:
        return 3 * self.vq.g * self.vq.g + L_TEXT


def _wrap(error: ValidationError) -> ConfigError:
    details = "; ".join(f"{'.'.join(str(p) for p in e['loc']) or 'config'}: {e['msg']}" for e in error.errors())
    return ConfigError(f"Invalid configuration: {details}")


def parse_config(document: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as error:
        raise _wrap(error) from None


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Reads a JSON run configuration; no path gives the defaults.

    Raises:
        ConfigError: Unknown keys or invalid values.
        FileNotFoundError: Missing file.
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as error:
            raise ConfigError(f"Config {path} is not valid JSON: {error}") from None
    config = parse_config(document)
    logger.debug(f"Loaded config {path} (hash {config_hash(config)[:12]})")
    return config


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical (sorted-key) JSON dump."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def worker_count() -> int:
    """Worker cap from MMDIFF_THREADS (default 1)."""
    raw = os.getenv("MMDIFF_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"MMDIFF_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"MMDIFF_THREADS must be >= 1, got {value}")
    return value
