"""
Pipeline configuration - one flat key=value file plus --set overrides,
validated against a pydantic schema, hashed for provenance.
"""

import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Sequence, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from . import __version__
from .aggregate import AggregationSpec
from .dataset import AugmentParams, HeightNormalizer
from .errors import ConfigError, MissingInputError
from .metrics import StoreyClasses
from .model import ModelConfig
from .ntl import NtlConfig
from .training import SMOOTH_L1_DELTA, TrainConfig

logger = logging.getLogger(__name__)

PROVENANCE_FILE = "provenance.json"


def _parse_floats(value: Any) -> Any:
    """Accept "a,b,c" lists and "start:stop:step" ranges (stop inclusive) in config files"""
    if not isinstance(value, str):
        return value
    text = value.strip()
    if ":" in text:
        start, stop, step = (float(part) for part in text.split(":"))
        if step == 0:
            raise ValueError(f"range {text!r} has a zero step")
        n = int(round((stop - start) / step)) + 1
        if n < 1:
            raise ValueError(f"range {text!r} steps away from its stop")
        return tuple(start + i * step for i in range(n))
    return tuple(float(part) for part in text.split(",") if part.strip())


class PipelineConfig(BaseModel):
    """Every tunable of the pipeline; unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    city: str = "city"
    seed: int = 0

    # Compositing
    scene_cloud_limit: float = Field(60.0, ge=0, le=100)
    pixel_cloud_threshold: float = Field(40.0, ge=0, le=100)

    # Tiles
    tile_size: int = Field(256, ge=16)
    min_building_fraction: float = Field(0.10, ge=0, le=1)
    val_ratio: float = Field(0.10, gt=0, lt=1)
    height_norm: Literal["linear", "log"] = "linear"
    height_scale_m: float = Field(400.0, gt=0)
    height_log_cap_m: float = Field(400.0, gt=0)
    band_set: Literal["s1s2", "s1", "s2"] = "s1s2"
    augment: Literal["none", "rotate", "affine", "mask_s1"] = "none"
    rotate_max_deg: float = Field(10.0, ge=0)
    shear_max_deg: float = Field(8.0, ge=0)
    translate_max_fraction: float = Field(0.05, ge=0, lt=1)
    mask_min_fraction: float = Field(0.05, gt=0, le=1)
    mask_max_fraction: float = Field(0.25, gt=0, le=1)

    # Network
    depth: int = Field(3, ge=1)
    base_channels: int = Field(16, ge=1)
    head: Literal["multitask", "footprint_only", "height_only"] = "multitask"

    # Training
    lr_init: float = Field(1e-3, gt=0)
    lr_decay_factor: float = Field(0.1, gt=0)
    lr_decay_epoch: int = Field(50, ge=0)
    epochs: int = Field(100, ge=1)
    footprint_weight: float = Field(0.1, ge=0)
    height_weight: float = Field(1.0, ge=0)
    height_task_coefficient_grid: Tuple[float, ...] = (0.05, 0.1, 0.2, 1.0, 10.0)
    smooth_l1_delta: float = Field(SMOOTH_L1_DELTA, gt=0)
    batch_size: int = Field(8, ge=1)
    footprint_threshold: float = Field(0.5, gt=0, lt=1)

    # Evaluation
    metres_per_storey: float = Field(3.0, gt=0)
    hist_bin_width_m: float = Field(10.0, gt=0)
    hist_cap_m: float = Field(100.0, gt=0)

    # Aggregation
    side_lengths_m: Tuple[float, ...] = AggregationSpec().side_lengths_m
    min_valid_fraction: float = Field(0.5, ge=0, le=1)
    building_only: bool = False
    scatter_side_m: float = Field(200.0, gt=0)

    # Nightlights
    ntl_cell_m: float = Field(120.0, gt=0)
    slog_epsilon: float = Field(1e-9, gt=0)

    # Gradient check
    gradcheck_depth: int = Field(2, ge=1, le=2)
    gradcheck_base_channels: int = Field(8, ge=1, le=8)
    gradcheck_tile: int = Field(16, ge=4)
    gradcheck_batch: int = Field(2, ge=1)
    gradcheck_step: float = Field(1e-3, gt=0)
    gradcheck_samples: int = Field(32, ge=1)
    gradcheck_tolerance: float = Field(1e-3, gt=0)

    @field_validator("height_task_coefficient_grid", "side_lengths_m", mode="before")
    @classmethod
    def _split_floats(cls, value: Any) -> Any:
        return _parse_floats(value)

    @model_validator(mode="after")
    def _cross_field(self) -> "PipelineConfig":
        if self.lr_decay_epoch >= self.epochs:
            raise ValueError(f"lr_decay_epoch ({self.lr_decay_epoch}) must be < epochs ({self.epochs})")
        if self.footprint_weight == 0 and self.height_weight == 0:
            raise ValueError("at least one of footprint_weight, height_weight must be positive")
        if self.mask_min_fraction > self.mask_max_fraction:
            raise ValueError("mask_min_fraction must be <= mask_max_fraction")
        if self.tile_size % 2 ** self.depth:
            raise ValueError(f"tile_size {self.tile_size} not divisible by 2^depth ({2 ** self.depth})")
        if self.gradcheck_tile % 2 ** self.gradcheck_depth:
            raise ValueError(f"gradcheck_tile {self.gradcheck_tile} not divisible by 2^gradcheck_depth")
        if not self.height_task_coefficient_grid or min(self.height_task_coefficient_grid) <= 0:
            raise ValueError("height_task_coefficient_grid must hold positive values")
        return self

    # Typed views for the modules -------------------------------------------

    def normalizer(self) -> HeightNormalizer:
        return HeightNormalizer(self.height_norm, self.height_scale_m, self.height_log_cap_m)

    def augment_params(self) -> AugmentParams:
        return AugmentParams(
            rotate_max_deg=self.rotate_max_deg,
            shear_max_deg=self.shear_max_deg,
            translate_max_fraction=self.translate_max_fraction,
            mask_min_fraction=self.mask_min_fraction,
            mask_max_fraction=self.mask_max_fraction,
        )

    def network(self, in_channels: int, head: Optional[str] = None) -> ModelConfig:
        return ModelConfig(in_channels=in_channels, depth=self.depth, base_channels=self.base_channels,
                           head=head or self.head)

    def training(self) -> TrainConfig:
        return TrainConfig(
            lr_init=self.lr_init,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_epoch=self.lr_decay_epoch,
            epochs=self.epochs,
            footprint_weight=self.footprint_weight,
            height_weight=self.height_weight,
            height_task_coefficient_grid=self.height_task_coefficient_grid,
            smooth_l1_delta=self.smooth_l1_delta,
            batch_size=self.batch_size,
            seed=self.seed,
            band_set=self.band_set,
            augment=self.augment,
            augment_params=self.augment_params(),
            footprint_threshold=self.footprint_threshold,
        )

    def storey_classes(self) -> StoreyClasses:
        return StoreyClasses(metres_per_storey=self.metres_per_storey)

    def aggregation(self) -> AggregationSpec:
        return AggregationSpec(self.side_lengths_m, self.min_valid_fraction, self.building_only)

    def ntl(self) -> NtlConfig:
        return NtlConfig(cell_m=self.ntl_cell_m, slog_epsilon=self.slog_epsilon)


def parse_overrides(pairs: Sequence[str]) -> Dict[str, str]:
    """--set key=value pairs to a dict (later pairs win)"""
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {pair!r} is not key=value")
        overrides[key.strip().lower()] = value.strip()
    return overrides


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, str]] = None) -> PipelineConfig:
    """
    Resolve the pipeline configuration

    Args:
        path: Optional key=value file ('#' comments); read without touching os.environ
        overrides: Values that replace file entries

    Returns:
        Validated PipelineConfig
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"config file not found: {path}")
        for key, value in dotenv_values(path, interpolate=False).items():
            if value is None:
                raise ConfigError(f"{path}: key {key!r} has no value")
            values[key.lower()] = value
    values.update({k.lower(): v for k, v in (overrides or {}).items()})

    try:
        config = PipelineConfig(**values)
    except PydanticValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigError(f"{location}: {first['msg']}") from None
    logger.debug("config resolved (%d keys from file/overrides)", len(values))
    return config


def config_hash(config: PipelineConfig) -> str:
    """SHA-256 of the canonical (sorted-key) JSON of the resolved config"""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def version_stamp(config: PipelineConfig, command: str) -> Dict[str, Any]:
    """Provenance block recorded with every artifact directory"""
    return {
        "artifact_version": __version__,
        "command": command,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "config": config.model_dump(mode="json"),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


def write_provenance(directory: Union[str, Path], stamp: Dict[str, Any]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / PROVENANCE_FILE
    path.write_text(json.dumps(stamp, indent=2, sort_keys=True), encoding="utf-8")
    return path
