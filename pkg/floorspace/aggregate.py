"""
Spatial block aggregation and the explained-variance-vs-cell-size analysis.

Block means average per-pixel height over all valid pixels of a cell
(background counts as 0) unless `building_only` is set. An optional trust
raster (uint8, 0 = excluded) masks pixels at every scale.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .errors import AlignmentError, ValidationError
from .raster import GeoTransform, Raster

logger = logging.getLogger(__name__)

PIXEL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class AggregationSpec:
    side_lengths_m: Tuple[float, ...] = tuple(float(L) for L in range(10, 2001, 10))
    min_valid_fraction: float = 0.5
    building_only: bool = False

    def __post_init__(self):
        if not self.side_lengths_m or any(L <= 0 for L in self.side_lengths_m):
            raise ValidationError("side lengths must be positive")
        if not 0 <= self.min_valid_fraction <= 1:
            raise ValidationError("min_valid_fraction must be in [0, 1]")


def block_factor(transform: GeoTransform, L_m: float) -> int:
    """Pixels per block side; L_m must be a whole multiple of the (square) pixel"""
    k = L_m / transform.pixel_w
    if abs(transform.pixel_w + transform.pixel_h) > PIXEL_TOLERANCE * transform.pixel_w:
        raise ValidationError("block aggregation needs square pixels")
    if k < 1 - PIXEL_TOLERANCE or abs(k - round(k)) > PIXEL_TOLERANCE * max(k, 1.0):
        raise ValidationError(f"side length {L_m} m is not a multiple of the {transform.pixel_w} m pixel")
    return int(round(k))


def _pixel_mask(raster: Raster, trust: Optional[Raster]) -> Tuple[np.ndarray, np.ndarray]:
    if raster.bands != 1:
        raise ValidationError(f"aggregation expects a single-band raster, got {raster.bands} bands")
    values = raster.masked(0)
    covered = ~np.isnan(values)
    if trust is not None:
        if not trust.same_grid(raster):
            raise AlignmentError("trust mask does not share the raster grid")
        covered &= trust.data[0] > 0
    return np.where(covered, values, 0.0), covered


def _block_means(
    raster: Raster,
    k: int,
    min_valid_fraction: float,
    trust: Optional[Raster],
    building_only: bool,
) -> np.ndarray:
    """Float64 (rows, cols) block means with NaN for rejected blocks"""
    values, covered = _pixel_mask(raster, trust)
    rows, cols = raster.height // k, raster.width // k
    crop = (slice(0, rows * k), slice(0, cols * k))

    def block_sum(a: np.ndarray) -> np.ndarray:
        return a[crop].reshape(rows, k, cols, k).sum(axis=(1, 3))

    contributing = covered & (values > 0) if building_only else covered
    n_covered = block_sum(covered.astype(np.int64))
    n_used = block_sum(contributing.astype(np.int64))
    total = block_sum(np.where(contributing, values, 0.0))
    keep = (n_covered >= min_valid_fraction * k * k) & (n_used > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(keep, total / np.maximum(n_used, 1), np.nan)


def block_mean(
    raster: Raster,
    L_m: float,
    min_valid_fraction: float = 0.5,
    trust: Optional[Raster] = None,
    building_only: bool = False,
) -> Raster:
    """
    Aggregate a single-band raster to L_m x L_m blocks

    Args:
        raster: Single-band raster (NaN or sentinel nodata)
        L_m: Block side in meters, a multiple of the pixel size
        min_valid_fraction: Blocks with a smaller valid share become nodata
        trust: Optional uint8 mask on the same grid (0 = excluded)
        building_only: Average over pixels with value > 0 only

    Returns:
        Float32 raster of block means; partial edge blocks are dropped
    """
    k = block_factor(raster.transform, L_m)
    means = _block_means(raster, k, min_valid_fraction, trust, building_only)
    t = raster.transform
    return Raster(
        data=means.astype(np.float32)[np.newaxis],
        transform=GeoTransform(t.origin_x, t.origin_y, t.pixel_w * k, t.pixel_h * k),
    )


@dataclass
class R2Result:
    side_length_m: float
    r2: Optional[float]
    n_cells: int
    intercept: Optional[float] = None
    slope: Optional[float] = None


def r2_at_scale(
    pred: Raster,
    ref: Raster,
    L_m: float,
    min_valid_fraction: float = 0.5,
    trust: Optional[Raster] = None,
    building_only: bool = False,
) -> R2Result:
    """
    Explained variance of an OLS fit ref_cell = a + b * pred_cell at scale L_m

    Undefined (r2 None) with fewer than 3 cells or a constant reference.
    """
    if not pred.same_grid(ref):
        raise AlignmentError("prediction and reference do not share the grid")
    k = block_factor(ref.transform, L_m)
    x = _block_means(pred, k, min_valid_fraction, trust, building_only).ravel()
    y = _block_means(ref, k, min_valid_fraction, trust, building_only).ravel()
    both = ~np.isnan(x) & ~np.isnan(y)
    x, y = x[both], y[both]
    n = int(x.size)

    if n < 3 or np.all(y == y[0]):
        return R2Result(L_m, None, n)
    if np.all(x == x[0]):
        # Intercept-only fit explains nothing
        return R2Result(L_m, 0.0, n, float(y.mean()), 0.0)
    fit = stats.linregress(x, y)
    return R2Result(L_m, float(fit.rvalue ** 2), n, float(fit.intercept), float(fit.slope))


def r2_curve(
    pred: Raster,
    ref: Raster,
    spec: AggregationSpec = AggregationSpec(),
    trust: Optional[Raster] = None,
    workers: Optional[int] = None,
) -> List[R2Result]:
    """R^2 for every side length in ascending order; blocks larger than the raster give r2 None"""
    lengths = sorted(spec.side_lengths_m)

    def one(L_m: float) -> R2Result:
        return r2_at_scale(pred, ref, L_m, spec.min_valid_fraction, trust, spec.building_only)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            curve = list(pool.map(one, lengths))
    else:
        curve = [one(L) for L in lengths]
    logger.info("R^2 curve over %d side lengths (%g..%g m)", len(curve), lengths[0], lengths[-1])
    return curve


@dataclass
class ScatterPoint:
    cell_x: float  # cell center, map coordinates
    cell_y: float
    log_ref: float
    log_pred: float


def scatter_export(
    pred: Raster,
    ref: Raster,
    L_m: float = 200.0,
    min_valid_fraction: float = 0.5,
    trust: Optional[Raster] = None,
    building_only: bool = False,
) -> List[ScatterPoint]:
    """Cells where both block means are > 0, as ln(mean + 1) pairs"""
    if not pred.same_grid(ref):
        raise AlignmentError("prediction and reference do not share the grid")
    p = block_mean(pred, L_m, min_valid_fraction, trust, building_only)
    r = block_mean(ref, L_m, min_valid_fraction, trust, building_only)
    pv = p.data[0].astype(np.float64)
    rv = r.data[0].astype(np.float64)
    xs, ys = p.transform.pixel_centers(p.width, p.height)

    with np.errstate(invalid="ignore"):
        rows, cols = np.nonzero((pv > 0) & (rv > 0))
    return [
        ScatterPoint(float(xs[c]), float(ys[r_]), float(np.log1p(rv[r_, c])), float(np.log1p(pv[r_, c])))
        for r_, c in zip(rows, cols)
    ]


def _fmt(value) -> str:
    return "null" if value is None or (isinstance(value, float) and math.isnan(value)) else repr(value)


def write_curve_csv(curve: Sequence[R2Result], path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["side_length_m", "r2", "n_cells"])
        for point in curve:
            writer.writerow([_fmt(point.side_length_m), _fmt(point.r2), point.n_cells])


def write_scatter_csv(points: Sequence[ScatterPoint], path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["cell_x", "cell_y", "log_ref", "log_pred"])
        for p in points:
            writer.writerow([repr(p.cell_x), repr(p.cell_y), repr(p.log_ref), repr(p.log_pred)])
