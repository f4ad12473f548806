"""
Inference - tiled prediction over a whole mosaic and the two-stage
(footprint first, then height) composition variants.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .dataset import BAND_SETS, HeightNormalizer, TileSetManifest
from .errors import ConditioningError, UnsupportedVariantError, ValidationError
from .ingest import BandStack, BandStats, standardize
from .model import FloorspaceModel, ModelConfig
from .raster import Raster

logger = logging.getLogger(__name__)

COMPOSE_MODES = ("A1", "A2")
FOOTPRINT_THRESHOLD = 0.5

InputBuilder = Callable[[torch.Tensor], torch.Tensor]


def checkpoint_meta(manifest: TileSetManifest, band_set: str, compose: Optional[str] = None) -> Dict[str, Any]:
    """Manifest stored in the FSM1 config block next to the model config"""
    return {
        "band_set": band_set,
        "band_stats": manifest.band_stats,
        "normalization": manifest.normalization.model_dump(),
        "tile_size": manifest.tile_size,
        "compose": compose,
    }


def _meta_normalizer(model: FloorspaceModel) -> HeightNormalizer:
    return HeightNormalizer(**model.meta["normalization"]) if "normalization" in model.meta else HeightNormalizer()


def prepare_stack(stack: BandStack, model: FloorspaceModel) -> BandStack:
    """
    Standardize a raw stack with the checkpoint's band stats, or verify
    that an already-standardized stack used the same stats
    """
    if "band_stats" not in model.meta:
        if stack.stats is None:
            raise ConditioningError("checkpoint carries no band stats and the stack is not standardized")
        return stack
    expected = BandStats.from_dict(model.meta["band_stats"])
    if stack.stats is None:
        return standardize(stack, expected)
    if not (np.allclose(stack.stats.mean, expected.mean, rtol=1e-6, atol=0)
            and np.allclose(stack.stats.std, expected.std, rtol=1e-6, atol=0)):
        raise ConditioningError(
            f"stack was standardized with stats {stack.stats.to_dict()}, checkpoint expects {expected.to_dict()}"
        )
    return stack


@dataclass
class Prediction:
    """Per-pixel prediction on the stack grid; nodata input pixels have NaN probability"""
    probability: Optional[Raster]  # float32 footprint probability
    mask: Raster  # uint8 footprint at the threshold
    height_m: Raster  # float32 height, 0 off-footprint


def _run_tiles(
    stack: BandStack,
    T: int,
    channels: Tuple[int, ...],
    forward: Callable[[torch.Tensor], Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]],
    progress: bool,
) -> Tuple[Optional[np.ndarray], Optional[np.ndarray], np.ndarray]:
    """Pad the mosaic to whole tiles, run forward per tile, stitch and crop"""
    raster = stack.raster
    H, W = raster.height, raster.width
    rows, cols = math.ceil(H / T), math.ceil(W / T)
    valid = raster.valid_mask()
    padded = np.zeros((len(channels), rows * T, cols * T), dtype=np.float32)
    padded[:, :H, :W] = np.where(valid, raster.data, 0.0)[list(channels)]

    prob = height = None
    for r, c in tqdm([(r, c) for r in range(rows) for c in range(cols)], desc="Predicting", disable=not progress):
        x = torch.from_numpy(padded[None, :, r * T:(r + 1) * T, c * T:(c + 1) * T].copy())
        p, h = forward(x)
        if p is not None:
            if prob is None:
                prob = np.zeros((rows * T, cols * T), dtype=np.float32)
            prob[r * T:(r + 1) * T, c * T:(c + 1) * T] = p[0, 0].numpy()
        if h is not None:
            if height is None:
                height = np.zeros((rows * T, cols * T), dtype=np.float32)
            height[r * T:(r + 1) * T, c * T:(c + 1) * T] = h[0, 0].numpy()

    crop = (slice(0, H), slice(0, W))
    return (
        prob[crop] if prob is not None else None,
        height[crop] if height is not None else None,
        valid.all(axis=0),
    )


def _assemble(
    prob: np.ndarray,
    height_norm: np.ndarray,
    valid: np.ndarray,
    normalizer: HeightNormalizer,
    stack: BandStack,
    threshold: float,
) -> Prediction:
    mask = (valid & (prob >= threshold)).astype(np.uint8)
    prob = np.where(valid, prob, np.nan).astype(np.float32)
    height = np.where(mask == 1, normalizer.denormalize(height_norm), 0.0).astype(np.float32)
    transform = stack.raster.transform
    return Prediction(
        probability=Raster(prob, transform),
        mask=Raster(mask, transform),
        height_m=Raster(height, transform),
    )


def predict(
    model: FloorspaceModel,
    stack: BandStack,
    T: int,
    threshold: float = FOOTPRINT_THRESHOLD,
    progress: bool = False,
) -> Prediction:
    """
    Predict footprint and height over a whole mosaic

    Args:
        model: Multi-task model (footprint and height heads)
        stack: Raw or standardized 6-band stack
        T: Tile size; edge tiles are zero-padded and cropped back
        threshold: Footprint probability threshold

    Returns:
        Prediction on the stack grid, heights in meters
    """
    if not (model.config.has_footprint and model.config.has_height):
        raise ValidationError(f"predict needs a multitask model, got head {model.config.head!r}")
    stack = prepare_stack(stack, model)
    channels = BAND_SETS[model.meta.get("band_set", "s1s2")]
    prob, height_norm, valid = _run_tiles(stack, T, channels, model.infer, progress)
    logger.info("predicted %dx%d mosaic with %dpx tiles", stack.raster.width, stack.raster.height, T)
    return _assemble(prob, height_norm, valid, _meta_normalizer(model), stack, threshold)


def compose_two_stage(
    stage1: FloorspaceModel,
    mode: str,
    base: ModelConfig = ModelConfig(),
) -> Tuple[InputBuilder, ModelConfig]:
    """
    Input builder and stage-2 config for a two-stage height model

    A1 stacks the stage-1 probability map as an extra channel; A2 multiplies
    the bands by the stage-1 binary footprint.

    Args:
        stage1: Trained footprint_only model
        mode: "A1" or "A2"
        base: Depth and width for the stage-2 model

    Returns:
        (builder, stage-2 ModelConfig with head height_only)
    """
    if mode == "A3":
        raise UnsupportedVariantError("two-stage variant A3 is not supported")
    if mode not in COMPOSE_MODES:
        raise ValidationError(f"unknown two-stage mode {mode!r}; choose from {COMPOSE_MODES}")
    if stage1.config.head != "footprint_only":
        raise ValidationError(f"stage 1 must be a footprint_only model, got {stage1.config.head!r}")

    def build(x: torch.Tensor) -> torch.Tensor:
        prob, _ = stage1.infer(x)
        prob = prob.to(x.dtype)
        if mode == "A1":
            return torch.cat([x, prob], dim=1)
        return x * (prob >= FOOTPRINT_THRESHOLD).to(x.dtype)

    in_channels = stage1.config.in_channels + (1 if mode == "A1" else 0)
    config = ModelConfig(in_channels=in_channels, depth=base.depth, base_channels=base.base_channels, head="height_only")
    return build, config


def predict_two_stage(
    stage1: FloorspaceModel,
    stage2: FloorspaceModel,
    stack: BandStack,
    T: int,
    threshold: float = FOOTPRINT_THRESHOLD,
    progress: bool = False,
) -> Prediction:
    """Footprint from stage 1, height from stage 2 fed through the A1/A2 builder"""
    mode = stage2.meta.get("compose")
    build, _ = compose_two_stage(stage1, mode, stage2.config)
    stack = prepare_stack(stack, stage1)
    channels = BAND_SETS[stage1.meta.get("band_set", "s1s2")]

    def forward(x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        prob, _ = stage1.infer(x)
        _, height = stage2.infer(build(x))
        return prob, height

    prob, height_norm, valid = _run_tiles(stack, T, channels, forward, progress)
    logger.info("two-stage (%s) prediction over %dx%d mosaic", mode, stack.raster.width, stack.raster.height)
    return _assemble(prob, height_norm, valid, _meta_normalizer(stage2), stack, threshold)
