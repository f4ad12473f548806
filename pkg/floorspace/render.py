"""
Map rendering - single-band rasters to binary PPM images with a text
sidecar recording the value-to-color mapping.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
from PIL import Image

from .errors import ValidationError
from .raster import Raster

logger = logging.getLogger(__name__)

Color = Tuple[int, int, int]

# Anchor colors at t = 0, 0.5, 1
PALETTES: Dict[str, Tuple[Color, Color, Color]] = {
    "diverging": ((118, 42, 131), (255, 255, 255), (178, 24, 43)),
    "sequential": ((0, 0, 0), (255, 0, 0), (255, 255, 0)),
}
NODATA_COLOR: Color = (0, 255, 0)
CLIP_PERCENTILES = (2.0, 98.0)


@dataclass
class RenderResult:
    path: Path
    sidecar: Path
    low: float
    high: float


def value_range(values: np.ndarray, palette: str) -> Tuple[float, float]:
    """2nd/98th percentile range; symmetric about 0 for the diverging palette"""
    if values.size == 0:
        return 0.0, 0.0
    low, high = (float(v) for v in np.percentile(values, CLIP_PERCENTILES))
    if palette == "diverging":
        m = max(abs(low), abs(high))
        return -m, m
    return low, high


def colorize(values: np.ndarray, palette: str, low: float, high: float) -> np.ndarray:
    """Map values linearly to RGB; NaN gets the nodata color"""
    anchors = np.asarray(PALETTES[palette], dtype=np.float64)
    if high > low:
        t = np.clip((values - low) / (high - low), 0.0, 1.0)
    else:
        # Degenerate range: a single color (the midpoint for a diverging map centered on 0)
        t = np.full(values.shape, 0.5 if palette == "diverging" and low == 0 else 0.0)
    t = np.where(np.isnan(values), 0.0, t)
    stops = np.array([0.0, 0.5, 1.0])
    rgb = np.stack([np.interp(t, stops, anchors[:, ch]) for ch in range(3)], axis=-1)
    rgb = np.rint(rgb).astype(np.uint8)
    rgb[np.isnan(values)] = NODATA_COLOR
    return rgb


def render_map(raster: Raster, palette: str, path: Union[str, Path]) -> RenderResult:
    """
    Write a single-band raster as an 8-bit binary PPM (P6)

    Args:
        raster: Single-band raster
        palette: "diverging" (centered on 0) or "sequential"
        path: Output image path; the sidecar is written next to it with .txt

    Returns:
        RenderResult with the clipped value range
    """
    if raster.bands != 1:
        raise ValidationError(f"render_map expects a single-band raster, got {raster.bands} bands")
    if palette not in PALETTES:
        raise ValidationError(f"unknown palette {palette!r}; choose from {sorted(PALETTES)}")

    values = raster.masked(0)
    low, high = value_range(values[~np.isnan(values)], palette)
    rgb = colorize(values, palette, low, high)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, "RGB").save(path, format="PPM")

    sidecar = path.with_suffix(".txt")
    lines = [
        f"palette={palette}",
        f"colors={';'.join(','.join(map(str, c)) for c in PALETTES[palette])}",
        f"low={low!r}",
        f"high={high!r}",
        f"clip_percentiles={CLIP_PERCENTILES[0]!r},{CLIP_PERCENTILES[1]!r}",
        f"nodata_color={','.join(map(str, NODATA_COLOR))}",
        f"size={raster.width}x{raster.height}",
    ]
    sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("rendered %s (%s, range %.4g..%.4g)", path, palette, low, high)
    return RenderResult(path=path, sidecar=sidecar, low=low, high=high)
