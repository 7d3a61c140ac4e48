"""
Run Configuration
Typed, versioned YAML configuration with environment overrides
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import torch
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from modules.errors import ConfigError

DEFAULT_BANDS: Tuple[Tuple[float, float], ...] = (
    (0.05, 0.10),
    (0.10, 0.25),
    (0.25, 0.50),
    (0.50, 0.75),
    (0.75, 0.95),
)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FingerprintOverrides(_Section):
    """Dataset-independent knobs of the fingerprint pre-processing"""

    target_size: Tuple[int, int] = (256, 256)
    orientation: str = "RAS"
    crop_margin: float = Field(2.0, gt=0)
    max_resample_ratio: float = Field(100.0, gt=1)

    @field_validator("target_size")
    @classmethod
    def _positive_size(cls, value):
        if min(value) < 1:
            raise ValueError("target_size must be positive")
        return value

    @field_validator("orientation")
    @classmethod
    def _axis_code(cls, value):
        value = value.upper()
        axes = {"L": 0, "R": 0, "P": 1, "A": 1, "I": 2, "S": 2}
        if len(value) != 3 or any(c not in axes for c in value) or len({axes[c] for c in value}) != 3:
            raise ValueError(f"invalid orientation code: {value}")
        return value


class VaeConfig(_Section):
    """Spatial VAE-GAN hyperparameters (stage 1)"""

    latent_channels: Literal[2] = 2
    compression_factor: int = 4
    channels: Tuple[int, ...] = (32, 64, 128)
    norm_groups: int = 8

    lambda_kld: float = Field(1e-6, ge=0)
    lambda_perc: float = Field(1.0, ge=0)
    lambda_adv: float = Field(0.01, ge=0)
    lambda_dice: float = Field(1.0, ge=0)

    perceptual_network: Literal["vgg16"] = "vgg16"
    perceptual_pretrained: bool = False
    perceptual_depth: int = Field(16, ge=1)
    disc_channels: int = 64
    disc_layers: int = Field(3, ge=1)

    lr: float = 2e-4
    disc_lr: float = 2e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(16, ge=1)
    holdout_fraction: float = Field(0.1, ge=0, lt=1)
    adv_start_epoch: int = Field(0, ge=0)
    divergence_patience: int = Field(5, ge=1)

    @field_validator("compression_factor")
    @classmethod
    def _power_of_two(cls, value):
        if value < 2 or value & (value - 1):
            raise ValueError("compression_factor must be a power of two >= 2")
        return value

    @model_validator(mode="after")
    def _width_schedule(self):
        levels = self.compression_factor.bit_length() - 1
        if len(self.channels) != levels + 1:
            raise ValueError(
                f"channels needs {levels + 1} entries for compression_factor={self.compression_factor}"
            )
        if any(ch % self.norm_groups for ch in self.channels):
            raise ValueError("every channel width must be divisible by norm_groups")
        return self


class ToeConfig(_Section):
    """Team of Experts conditioning"""

    mode: Literal["full", "positional", "image"] = "full"
    e1_hidden: Tuple[int, ...] = (64, 128)
    d_e: int = 256
    d_c: int = 256
    n_heads: int = 4
    vision_encoder: Literal["resnet18", "random_cnn"] = "resnet18"
    vision_pretrained: bool = True
    vision_frozen: Literal[True] = True
    substitute_encoder: Literal["random_cnn"] = "random_cnn"
    vision_seed: int = 0
    random_cnn_channels: int = 64

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_c % self.n_heads:
            raise ValueError("n_heads must divide d_c")
        return self


class LdmConfig(_Section):
    """Conditional latent diffusion (stage 2)"""

    t_train: int = Field(1000, ge=2)
    steps: int = Field(20, ge=1)
    schedule: Literal["linear", "scaled_linear"] = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    unet_channels: Tuple[int, ...] = (64, 128)
    layers_per_block: int = 1
    attention_heads: int = 8
    norm_groups: int = 32
    lr: float = 1e-4
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(32, ge=1)
    divergence_patience: int = Field(5, ge=1)
    sample_batch_size: int = Field(16, ge=1)

    @model_validator(mode="after")
    def _consistent(self):
        if self.steps > self.t_train:
            raise ValueError("steps cannot exceed t_train")
        if any(ch % self.norm_groups or ch % self.attention_heads for ch in self.unet_channels):
            raise ValueError("unet_channels must be divisible by norm_groups and attention_heads")
        return self


class DegradeConfig(_Section):
    """Synthetic degradation engine; ranges chosen for band reachability"""

    bands: List[Tuple[float, float]] = Field(default_factory=lambda: [tuple(b) for b in DEFAULT_BANDS])
    max_retries: int = Field(50, ge=1)
    ops_per_trial: Tuple[int, int] = (1, 3)
    holes_max: int = Field(6, ge=1)
    hole_radius_fraction: float = Field(0.5, gt=0)
    fp_blobs_max: int = Field(4, ge=1)
    fp_radius_fraction: float = Field(0.6, gt=0)
    erosion_fraction: float = Field(1.0, gt=0)
    # retries count operator draws; each draw brackets and bisects its strength
    escalate: float = Field(2.0, gt=1)
    strength_range: Tuple[float, float] = (0.05, 20.0)
    bisection_steps: int = Field(10, ge=1)

    @field_validator("bands")
    @classmethod
    def _valid_bands(cls, value):
        for lo, hi in value:
            if not 0 <= lo < hi <= 1:
                raise ValueError(f"invalid band [{lo}, {hi})")
        return value

    @field_validator("strength_range")
    @classmethod
    def _valid_strengths(cls, value):
        if not 0 < value[0] < value[1]:
            raise ValueError(f"strength_range must satisfy 0 < min < max, got {value}")
        return value


class EvaluateConfig(_Section):
    test_fraction: float = Field(0.2, gt=0, lt=1)
    metrics: List[Literal["dsc", "hd95"]] = Field(default_factory=lambda: ["dsc", "hd95"])
    hd95_sentinel: Optional[float] = None


class PhantomSpec(_Section):
    """Synthetic nested-ellipsoid dataset used as the canonical CI data"""

    n_subjects: int = Field(40, ge=1)
    grid_size: int = Field(64, ge=8)
    slice_range: Tuple[int, int] = (12, 20)
    n_classes: int = Field(2, ge=1)
    shape_family: Literal["ellipsoid"] = "ellipsoid"
    noise_level: float = Field(0.05, ge=0)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 2.0)
    seed: int = 0

    @field_validator("slice_range")
    @classmethod
    def _ordered(cls, value):
        if value[0] < 1 or value[0] > value[1]:
            raise ValueError("slice_range must satisfy 1 <= min <= max")
        return value


class RunConfig(_Section):
    """Top-level configuration of one dataset's QC model"""

    version: Literal[1] = 1
    dataset_name: str = "phantom"
    dataset_path: Path = Path("data/phantom")
    output_dir: Path = Path("runs")
    seed: int = 0
    device: str = "auto"
    workers: int = Field(0, ge=0)

    fingerprint: FingerprintOverrides = Field(default_factory=FingerprintOverrides)
    vae: VaeConfig = Field(default_factory=VaeConfig)
    toe: ToeConfig = Field(default_factory=ToeConfig)
    ldm: LdmConfig = Field(default_factory=LdmConfig)
    degrade: DegradeConfig = Field(default_factory=DegradeConfig)
    evaluate: EvaluateConfig = Field(default_factory=EvaluateConfig)
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)

    @property
    def workspace(self) -> Path:
        """Checkpoints, corpora and reports are namespaced per dataset"""
        return Path(self.output_dir) / self.dataset_name

    def digest(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def require_paths(self, *fields: str) -> None:
        """
        Check that input paths referenced by the config exist

        Args:
            fields: Attribute names holding paths (e.g. 'dataset_path')
        """
        for name in fields:
            path = Path(getattr(self, name))
            if not path.exists():
                raise ConfigError(f"{name} does not exist: {path}")


def apply_env_overrides(config: RunConfig) -> RunConfig:
    """Environment variables (optionally from .env) take precedence over YAML"""
    load_dotenv()
    updates = {}
    if os.getenv("NNQC_DEVICE"):
        updates["device"] = os.getenv("NNQC_DEVICE")
    if os.getenv("NNQC_OUTPUT_DIR"):
        updates["output_dir"] = Path(os.getenv("NNQC_OUTPUT_DIR"))
    if os.getenv("NNQC_WORKERS"):
        try:
            updates["workers"] = int(os.getenv("NNQC_WORKERS"))
        except ValueError:
            raise ConfigError("NNQC_WORKERS must be an integer")
    return config.model_copy(update=updates) if updates else config


def load_config(path: Optional[Path] = None) -> RunConfig:
    """
    Load and validate a run configuration

    Args:
        path: YAML file; None gives the defaults

    Returns:
        Validated RunConfig with environment overrides applied
    """
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as handle:
            try:
                raw = yaml.safe_load(handle) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"could not parse {path}: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a single mapping")
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(str(e))
    return apply_env_overrides(config)


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def configure_logging(level: Optional[str] = None) -> None:
    load_dotenv()
    level = (level or os.getenv("NNQC_LOG_LEVEL") or "INFO").upper()
    root = logging.getLogger()
    root.setLevel(level)
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
