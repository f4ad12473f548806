"""
Nightlight comparison - put heights on the NTL grid, fit the least-squares
scale factor and build signed log-difference maps.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy import stats

from .errors import AlignmentError, DegenerateMapError, ValidationError
from .raster import GeoTransform, Raster

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NtlConfig:
    cell_m: float = 120.0
    slog_epsilon: float = 1e-9

    def __post_init__(self):
        if not self.cell_m > 0:
            raise ValidationError(f"cell_m must be > 0, got {self.cell_m}")
        if not self.slog_epsilon > 0:
            raise ValidationError(f"slog_epsilon must be > 0, got {self.slog_epsilon}")


def _extent(r: Raster) -> Tuple[float, float, float, float]:
    t = r.transform
    return t.origin_x, t.origin_y + r.height * t.pixel_h, t.origin_x + r.width * t.pixel_w, t.origin_y


def ntl_grid_like(raster: Raster, cell_m: float = 120.0) -> Raster:
    """Empty (NaN) grid of cell_m cells anchored at the raster origin and covering it"""
    if not cell_m > 0:
        raise ValidationError(f"cell_m must be > 0, got {cell_m}")
    t = raster.transform
    width = math.ceil(raster.width * t.pixel_w / cell_m - 1e-9)
    height = math.ceil(raster.height * -t.pixel_h / cell_m - 1e-9)
    return Raster(
        data=np.full((1, height, width), np.nan, dtype=np.float32),
        transform=GeoTransform(t.origin_x, t.origin_y, cell_m, -cell_m),
    )


def align_to_ntl(height: Raster, ntl: Raster, trust: Optional[Raster] = None) -> Raster:
    """
    Mean height per NTL cell from the pixels whose centers fall inside it

    Args:
        height: Single-band height raster (meters)
        ntl: Any raster defining the target grid (its values are not read)
        trust: Optional uint8 mask on the height grid (0 = excluded)

    Returns:
        Float32 raster on the NTL grid; cells without contributing pixels are NaN
    """
    hx0, hy0, hx1, hy1 = _extent(height)
    nx0, ny0, nx1, ny1 = _extent(ntl)
    if min(hx1, nx1) <= max(hx0, nx0) or min(hy1, ny1) <= max(hy0, ny0):
        raise AlignmentError(f"height extent {(hx0, hy0, hx1, hy1)} does not overlap NTL extent {(nx0, ny0, nx1, ny1)}")

    values = height.masked(0)
    usable = ~np.isnan(values)
    if trust is not None:
        if not trust.same_grid(height):
            raise AlignmentError("trust mask does not share the height grid")
        usable &= trust.data[0] > 0

    xs, ys = height.transform.pixel_centers(height.width, height.height)
    t = ntl.transform
    cols = np.floor((xs - t.origin_x) / t.pixel_w).astype(np.int64)
    rows = np.floor((ys - t.origin_y) / t.pixel_h).astype(np.int64)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    inside = usable & (rr >= 0) & (rr < ntl.height) & (cc >= 0) & (cc < ntl.width)

    flat = rr[inside] * ntl.width + cc[inside]
    size = ntl.height * ntl.width
    sums = np.bincount(flat, weights=values[inside], minlength=size)
    counts = np.bincount(flat, minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return Raster(data=means.reshape(1, ntl.height, ntl.width).astype(np.float32), transform=t)


@dataclass
class ScaleFit:
    scale_b: Optional[float]
    pearson_r: Optional[float]
    n_cells: int


def _paired(pred, target) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(pred, Raster) or isinstance(target, Raster):
        if not (isinstance(pred, Raster) and isinstance(target, Raster) and pred.same_grid(target)):
            raise AlignmentError("prediction and target do not share the grid")
        pred, target = pred.masked(0), target.masked(0)
    p = np.asarray(pred, dtype=np.float64).ravel()
    q = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ValidationError(f"cell arrays differ in size: {p.size} vs {q.size}")
    both = np.isfinite(p) & np.isfinite(q)
    return p[both], q[both]


def fit_scale(pred, target) -> ScaleFit:
    """
    No-intercept least-squares scale b minimizing sum((b*pred - target)^2)

    Args:
        pred, target: Cell values (arrays or rasters on one grid); NaN cells are skipped

    Returns:
        ScaleFit with b = sum(pred*target) / sum(pred^2) (None when pred is all
        zero) and the Pearson r (None when either side is constant)
    """
    p, q = _paired(pred, target)
    if p.size < 2:
        raise ValidationError(f"need at least 2 cells valid in both inputs, got {p.size}")
    denom = float(np.dot(p, p))
    scale = float(np.dot(p, q)) / denom if denom > 0 else None
    r = None
    if np.ptp(p) > 0 and np.ptp(q) > 0:
        r = float(stats.pearsonr(p, q)[0])
    return ScaleFit(scale_b=scale, pearson_r=r, n_cells=int(p.size))


def slog(z):
    """Odd log transform sign(z) * ln(1 + |z|)"""
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.log1p(np.abs(z))


def log_diff_map(pred: Raster, target: Raster, cfg: NtlConfig = NtlConfig()) -> Tuple[Raster, ScaleFit]:
    """
    Signed, spread-scaled log difference between scaled prediction and target

    d = b*pred - target, z = d / std(d), output slog(z). Residuals within
    slog_epsilon of the data scale give a zero map; a nonzero residual with
    no spread raises DegenerateMapError.
    """
    fit = fit_scale(pred, target)
    if fit.scale_b is None:
        raise DegenerateMapError("prediction is zero on every shared cell; scale factor undefined")

    p, q = pred.masked(0), target.masked(0)
    valid = np.isfinite(p) & np.isfinite(q)
    d = np.where(valid, fit.scale_b * p - q, np.nan)
    residual = d[valid]
    scale = max(float(np.max(np.abs(fit.scale_b * p[valid]))), float(np.max(np.abs(q[valid]))))

    if np.max(np.abs(residual)) <= cfg.slog_epsilon * scale:
        out = np.where(valid, 0.0, np.nan)
    else:
        spread = float(residual.std())
        if spread == 0:
            raise DegenerateMapError("residuals are a nonzero constant; cannot scale by their spread")
        out = slog(d / spread)
    logger.info("log-difference map over %d cells (b=%.6g, r=%s)", fit.n_cells, fit.scale_b, fit.pearson_r)
    return Raster(data=out.astype(np.float32)[np.newaxis], transform=pred.transform), fit


def write_fit_json(fit: ScaleFit, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(asdict(fit), indent=2, sort_keys=True), encoding="utf-8")
