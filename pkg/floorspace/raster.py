"""
Raster core - georeferenced grids, building polygons and rasterization.

Every grid is north-up: pixel_w > 0, pixel_h < 0. Raster data is a numpy
array shaped (bands, height, width).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from pydantic import ValidationError as PydanticValidationError

from .errors import BoundsError, ValidationError

logger = logging.getLogger(__name__)

DTYPES = ("float32", "uint8")

# Distance (meters) under which a point counts as lying on a ring edge
EDGE_TOLERANCE_M = 1e-12

Point = Tuple[float, float]
Ring = List[Point]


@dataclass(frozen=True)
class GeoTransform:
    """Pixel-to-map mapping of a north-up grid (projected meters)"""
    origin_x: float
    origin_y: float
    pixel_w: float
    pixel_h: float

    def __post_init__(self):
        values = (self.origin_x, self.origin_y, self.pixel_w, self.pixel_h)
        if not all(math.isfinite(v) for v in values):
            raise ValidationError(f"geotransform values must be finite: {values}")
        if self.pixel_w <= 0:
            raise ValidationError(f"pixel_w must be > 0, got {self.pixel_w}")
        if self.pixel_h >= 0:
            raise ValidationError(f"pixel_h must be < 0 (north-up), got {self.pixel_h}")

    def shifted(self, dx_px: int, dy_px: int) -> "GeoTransform":
        """Transform of a window whose top-left pixel is (dx_px, dy_px)"""
        return replace(
            self,
            origin_x=self.origin_x + dx_px * self.pixel_w,
            origin_y=self.origin_y + dy_px * self.pixel_h,
        )

    def pixel_centers(self, width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
        """Map coordinates of pixel centers: x per column, y per row"""
        xs = self.origin_x + (np.arange(width) + 0.5) * self.pixel_w
        ys = self.origin_y + (np.arange(height) + 0.5) * self.pixel_h
        return xs, ys


@dataclass
class Raster:
    """Multi-band raster on a north-up grid"""
    data: np.ndarray  # (bands, height, width)
    transform: GeoTransform
    nodata: float = float("nan")

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[np.newaxis]
        if self.data.ndim != 3:
            raise ValidationError(f"raster data must be (bands, height, width), got shape {self.data.shape}")
        if self.data.dtype.name not in DTYPES:
            raise ValidationError(f"unsupported raster dtype {self.data.dtype}")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def dtype(self) -> str:
        return self.data.dtype.name

    def valid_mask(self) -> np.ndarray:
        """Boolean (bands, height, width) array, True where data is not nodata"""
        if self.dtype == "uint8":
            return np.ones(self.data.shape, dtype=bool)
        if math.isnan(self.nodata):
            return ~np.isnan(self.data)
        return self.data != np.float32(self.nodata)

    def masked(self, band: int = 0) -> np.ndarray:
        """Band as float64 with nodata replaced by NaN"""
        values = self.data[band].astype(np.float64)
        values[~self.valid_mask()[band]] = np.nan
        return values

    def same_grid(self, other: "Raster") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.transform == other.transform
        )

    def validate(self):
        """Check the finite-values invariant on float rasters"""
        if self.dtype == "float32":
            values = self.data[self.valid_mask()]
            if not np.all(np.isfinite(values)):
                raise ValidationError("raster holds non-finite values outside nodata")


@dataclass
class BuildingPolygon:
    """Building outline in projected meters with its height"""
    exterior: Ring
    height_m: float
    holes: List[Ring] = field(default_factory=list)

    def __post_init__(self):
        for ring in [self.exterior, *self.holes]:
            _check_ring(ring)
        if not (math.isfinite(self.height_m) and self.height_m > 0):
            raise ValidationError(f"building height must be > 0, got {self.height_m}")

    def rings(self) -> List[np.ndarray]:
        return [np.asarray(r, dtype=np.float64) for r in [self.exterior, *self.holes]]

    def bounds(self) -> Tuple[float, float, float, float]:
        ring = np.asarray(self.exterior, dtype=np.float64)
        return ring[:, 0].min(), ring[:, 1].min(), ring[:, 0].max(), ring[:, 1].max()


@dataclass
class LabelGrid:
    """Rasterized reference: footprint mask plus per-pixel height"""
    mask: Raster  # uint8, 1 band
    height_m: Raster  # float32, 1 band

    def __post_init__(self):
        if not self.mask.same_grid(self.height_m):
            raise ValidationError("mask and height rasters must share the grid")
        m = self.mask.data[0]
        h = self.height_m.data[0]
        if not np.isin(m, (0, 1)).all():
            raise ValidationError("label mask must be binary")
        if np.any((m == 0) & (h != 0)) or np.any((m == 1) & ~(h > 0)):
            raise ValidationError("label height must be > 0 exactly where mask = 1")

    @property
    def transform(self) -> GeoTransform:
        return self.mask.transform


def _check_ring(ring: Sequence[Point]):
    if len(ring) < 4:
        raise ValidationError(f"ring needs at least 3 vertices plus closure, got {len(ring)} points")
    if tuple(ring[0]) != tuple(ring[-1]):
        raise ValidationError("ring is not closed (first vertex != last vertex)")


def _ring_parity_and_edge(xs: np.ndarray, ys: np.ndarray, ring: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Crossing parity and on-edge flags of points against one closed ring"""
    inside = np.zeros(xs.shape, dtype=bool)
    on_edge = np.zeros(xs.shape, dtype=bool)
    for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
        straddles = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles & (xs < x_cross)

        dx, dy = x2 - x1, y2 - y1
        length = math.hypot(dx, dy)
        if length == 0:
            on_edge |= (xs == x1) & (ys == y1)
            continue
        cross = (xs - x1) * dy - (ys - y1) * dx
        within = (
            (xs >= min(x1, x2) - EDGE_TOLERANCE_M) & (xs <= max(x1, x2) + EDGE_TOLERANCE_M)
            & (ys >= min(y1, y2) - EDGE_TOLERANCE_M) & (ys <= max(y1, y2) + EDGE_TOLERANCE_M)
        )
        on_edge |= within & (np.abs(cross) <= EDGE_TOLERANCE_M * length)
    return inside, on_edge


def points_in_polygon(xs: np.ndarray, ys: np.ndarray, poly: BuildingPolygon) -> np.ndarray:
    """
    Vectorized even-odd test of many points against one polygon

    Args:
        xs, ys: Point coordinates (same shape)
        poly: Building polygon (exterior minus holes)

    Returns:
        Boolean array; points on any ring edge count as inside
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    parity = np.zeros(xs.shape, dtype=bool)
    edge = np.zeros(xs.shape, dtype=bool)
    for ring in poly.rings():
        ring_parity, ring_edge = _ring_parity_and_edge(xs, ys, ring)
        parity ^= ring_parity
        edge |= ring_edge
    return parity | edge


def point_in_polygon(p: Point, poly: BuildingPolygon) -> bool:
    """Even-odd test of a single point (edges count as inside)"""
    return bool(points_in_polygon(np.array([p[0]]), np.array([p[1]]), poly)[0])


def _burn_rows(
    polys: Sequence[BuildingPolygon],
    transform: GeoTransform,
    width: int,
    row_start: int,
    row_stop: int,
) -> np.ndarray:
    """Max height over covering polygons for rows [row_start, row_stop)"""
    heights = np.zeros((row_stop - row_start, width), dtype=np.float32)
    xs, _ = transform.pixel_centers(width, 0)
    ys = transform.origin_y + (np.arange(row_start, row_stop) + 0.5) * transform.pixel_h

    for poly in polys:
        minx, miny, maxx, maxy = poly.bounds()
        cols = np.nonzero((xs >= minx) & (xs <= maxx))[0]
        rows = np.nonzero((ys >= miny) & (ys <= maxy))[0]
        if cols.size == 0 or rows.size == 0:
            continue
        c0, c1 = cols[0], cols[-1] + 1
        r0, r1 = rows[0], rows[-1] + 1
        gx, gy = np.meshgrid(xs[c0:c1], ys[r0:r1])
        covered = points_in_polygon(gx, gy, poly)
        block = heights[r0:r1, c0:c1]
        np.maximum(block, np.where(covered, np.float32(poly.height_m), np.float32(0)), out=block)
    return heights


def rasterize(
    polys: Sequence[BuildingPolygon],
    transform: GeoTransform,
    width: int,
    height: int,
    workers: Optional[int] = None,
) -> LabelGrid:
    """
    Burn building polygons into a footprint mask and height grid

    A cell is a building iff its center lies inside at least one polygon;
    overlapping polygons resolve to the maximum height.

    Args:
        polys: Validated building polygons
        transform: Target grid geometry
        width, height: Grid size in pixels
        workers: Thread count for row bands (None = single band)

    Returns:
        LabelGrid on the target grid
    """
    polys = list(polys)
    n_bands = max(1, min(workers or 1, height))
    bounds = np.linspace(0, height, n_bands + 1).astype(int)
    spans = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    if len(spans) > 1:
        with ThreadPoolExecutor(max_workers=len(spans)) as pool:
            parts = list(pool.map(lambda s: _burn_rows(polys, transform, width, *s), spans))
    else:
        parts = [_burn_rows(polys, transform, width, 0, height)]

    heights = np.concatenate(parts, axis=0) if parts else np.zeros((0, width), np.float32)
    mask = (heights > 0).astype(np.uint8)
    logger.debug("rasterized %d polygons into %dx%d grid (%d building cells)",
                 len(polys), width, height, int(mask.sum()))
    return LabelGrid(
        mask=Raster(mask[np.newaxis], transform),
        height_m=Raster(heights[np.newaxis], transform),
    )


def window(raster: Raster, x0: int, y0: int, w: int, h: int) -> Raster:
    """Sub-raster of w x h pixels starting at column x0, row y0"""
    if x0 < 0 or y0 < 0 or w <= 0 or h <= 0 or x0 + w > raster.width or y0 + h > raster.height:
        raise BoundsError(
            f"window ({x0},{y0},{w},{h}) outside raster of {raster.width}x{raster.height}"
        )
    return Raster(
        data=raster.data[:, y0:y0 + h, x0:x0 + w].copy(),
        transform=raster.transform.shifted(x0, y0),
        nodata=raster.nodata,
    )


# GeoJSON subset ------------------------------------------------------------

class _PolygonGeometry(BaseModel):
    model_config = ConfigDict(extra="allow")

    type: Literal["Polygon"]
    coordinates: List[List[Tuple[float, float]]]


class _BuildingProperties(BaseModel):
    model_config = ConfigDict(extra="allow")

    height: float


class _Feature(BaseModel):
    model_config = ConfigDict(extra="allow")

    type: Literal["Feature"]
    geometry: _PolygonGeometry
    properties: _BuildingProperties


class _FeatureCollection(BaseModel):
    model_config = ConfigDict(extra="allow")

    type: Literal["FeatureCollection"]
    features: List[_Feature]


def parse_polygons(document: Union[str, dict]) -> List[BuildingPolygon]:
    """
    Parse a GeoJSON FeatureCollection of building polygons

    Only "Polygon" geometries with a numeric "height" property (meters)
    are accepted; anything else raises ValidationError.
    """
    try:
        if isinstance(document, str):
            collection = _FeatureCollection.model_validate_json(document)
        else:
            collection = _FeatureCollection.model_validate(document)
    except PydanticValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(p) for p in first["loc"]) or "document"
        raise ValidationError(f"invalid building GeoJSON at {location}: {first['msg']}") from None

    polygons = []
    for feature in collection.features:
        exterior, *holes = feature.geometry.coordinates or [[]]
        polygons.append(BuildingPolygon(
            exterior=[tuple(p) for p in exterior],
            holes=[[tuple(p) for p in hole] for hole in holes],
            height_m=feature.properties.height,
        ))
    return polygons


def load_polygons(path: Union[str, Path]) -> List[BuildingPolygon]:
    """Read building polygons from a GeoJSON file"""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ValidationError(f"{path} is not UTF-8 GeoJSON: {e}") from None
    polygons = parse_polygons(text)
    logger.info("loaded %d building polygons from %s", len(polygons), path)
    return polygons
