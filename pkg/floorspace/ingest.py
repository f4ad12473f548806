"""
Ingest - cloud-filtered temporal composites, S1/S2 band stacking and
per-band standardization.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import AlignmentError, ConditioningError, IngestError, MissingInputError, ValidationError
from .raster import Raster
from .raster_io import read_fsr

logger = logging.getLogger(__name__)

BAND_NAMES = ("VV", "VH", "B2", "B3", "B4", "B8")
S1_BANDS = BAND_NAMES[:2]
S2_BANDS = BAND_NAMES[2:]

DEFAULT_SCENE_CLOUD_LIMIT = 60.0
DEFAULT_PIXEL_CLOUD_THRESHOLD = 40.0


@dataclass
class TimeStack:
    """Observations of one area over time, optionally with cloud probability"""
    observations: List[Raster]
    cloud_prob: Optional[List[Raster]] = None

    def validate(self):
        if not self.observations:
            raise IngestError("empty time stack: no observations to composite")
        first = self.observations[0]
        for i, obs in enumerate(self.observations[1:], start=1):
            if not obs.same_grid(first) or obs.bands != first.bands:
                raise AlignmentError(f"observation {i} does not share the grid/band count of observation 0")
        if self.cloud_prob is not None:
            if len(self.cloud_prob) != len(self.observations):
                raise IngestError(
                    f"{len(self.cloud_prob)} cloud-probability rasters for {len(self.observations)} observations"
                )
            for i, prob in enumerate(self.cloud_prob):
                if not prob.same_grid(first) or prob.bands != 1:
                    raise AlignmentError(f"cloud-probability raster {i} is not a single band on the observation grid")


@dataclass(frozen=True)
class BandStats:
    """Per-band mean and standard deviation used for standardization"""
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ConditioningError("band stats mean/std lengths differ")
        for i, s in enumerate(self.std):
            if not (np.isfinite(s) and s > 0):
                raise ConditioningError(f"band {i} has non-positive standard deviation {s}")

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "BandStats":
        return cls(mean=tuple(float(v) for v in d["mean"]), std=tuple(float(v) for v in d["std"]))


@dataclass
class BandStack:
    """Six-band model input [VV, VH, B2, B3, B4, B8] plus standardization stats"""
    raster: Raster
    stats: Optional[BandStats] = field(default=None)

    def __post_init__(self):
        if self.raster.bands != len(BAND_NAMES):
            raise ValidationError(f"band stack needs {len(BAND_NAMES)} bands, got {self.raster.bands}")
        if self.raster.dtype != "float32":
            raise ValidationError("band stack must be float32")


def composite(
    stack: TimeStack,
    scene_cloud_limit: float = DEFAULT_SCENE_CLOUD_LIMIT,
    pixel_cloud_threshold: float = DEFAULT_PIXEL_CLOUD_THRESHOLD,
) -> Raster:
    """
    Per-pixel temporal mean of cloud-masked observations

    Args:
        stack: Observations (and cloud probability when optical)
        scene_cloud_limit: Drop scenes whose cloudy-pixel share (percent) exceeds this
        pixel_cloud_threshold: Mask pixels whose cloud probability (percent) exceeds this

    Returns:
        Float32 raster; pixels without any valid observation are nodata (NaN)
    """
    stack.validate()
    first = stack.observations[0]
    total = np.zeros(first.data.shape, dtype=np.float64)
    count = np.zeros(first.data.shape, dtype=np.int64)

    kept = 0
    # Scene-index order keeps the float sum reproducible
    for i, obs in enumerate(stack.observations):
        usable = obs.valid_mask()
        if stack.cloud_prob is not None:
            prob = stack.cloud_prob[i].masked(0)
            cloudy = np.nan_to_num(prob, nan=100.0) > pixel_cloud_threshold
            cloudy_share = 100.0 * cloudy.mean()
            if cloudy_share > scene_cloud_limit:
                logger.info("scene %d dropped: %.1f%% cloudy > %.1f%% limit", i, cloudy_share, scene_cloud_limit)
                continue
            usable &= ~cloudy[np.newaxis]
        kept += 1
        total += np.where(usable, obs.data, 0.0)
        count += usable

    if kept == 0:
        raise IngestError(
            f"all {len(stack.observations)} scenes dropped by the {scene_cloud_limit}% scene cloud limit"
        )

    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    logger.info("composited %d of %d scenes", kept, len(stack.observations))
    return Raster(data=mean.astype(np.float32), transform=first.transform)


def stack_bands(s1: Raster, s2: Raster) -> BandStack:
    """Concatenate Sentinel-1 [VV, VH] and Sentinel-2 [B2, B3, B4, B8] composites"""
    if s1.bands != len(S1_BANDS) or s2.bands != len(S2_BANDS):
        raise ValidationError(f"expected 2 SAR and 4 optical bands, got {s1.bands} and {s2.bands}")
    if not s1.same_grid(s2):
        raise AlignmentError(
            f"S1 grid {s1.width}x{s1.height} {s1.transform} != S2 grid {s2.width}x{s2.height} {s2.transform}"
        )
    parts = []
    for r in (s1, s2):
        values = r.data.astype(np.float32)
        values[~r.valid_mask()] = np.nan
        parts.append(values)
    return BandStack(raster=Raster(data=np.concatenate(parts, axis=0), transform=s1.transform))


def compute_band_stats(values: np.ndarray) -> BandStats:
    """
    Mean and population std per band over valid (non-NaN) pixels

    Args:
        values: (bands, ...) float array with NaN as nodata
    """
    flat = values.reshape(values.shape[0], -1).astype(np.float64)
    means, stds = [], []
    for band, v in enumerate(flat):
        v = v[~np.isnan(v)]
        if v.size == 0:
            raise ConditioningError(f"band {band} has no valid pixels")
        means.append(float(v.mean()))
        stds.append(float(v.std()))
        if stds[-1] == 0:
            raise ConditioningError(f"band {band} is constant ({means[-1]}); cannot standardize")
    return BandStats(mean=tuple(means), std=tuple(stds))


def standardize(stack: BandStack, stats: Optional[BandStats] = None) -> BandStack:
    """
    Map every band to (v - mean) / std, leaving nodata untouched

    When stats are omitted they are computed from the stack itself and
    recorded on the result.
    """
    values = np.stack([stack.raster.masked(b) for b in range(stack.raster.bands)])
    if stats is None:
        stats = compute_band_stats(values)
    if len(stats.mean) != stack.raster.bands:
        raise ConditioningError(f"stats cover {len(stats.mean)} bands, stack has {stack.raster.bands}")

    mean = np.asarray(stats.mean)[:, None, None]
    std = np.asarray(stats.std)[:, None, None]
    scaled = ((values - mean) / std).astype(np.float32)
    return BandStack(raster=replace(stack.raster, data=scaled, nodata=float("nan")), stats=stats)


def read_scene_list(path: Union[str, Path]) -> TimeStack:
    """
    Load a time stack from a scene list file

    Each non-empty line holds an FSR1 path and optionally a cloud-probability
    FSR1 path, whitespace-separated; '#' starts a comment. Relative paths
    resolve against the list file's directory.
    """
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"scene list not found: {path}")

    observations, probs = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        fields = line.split("#", 1)[0].split()
        if not fields:
            continue
        if len(fields) > 2:
            raise IngestError(f"{path}:{lineno}: expected 'scene [cloud_prob]', got {len(fields)} fields")
        resolved = [(path.parent / f) if not Path(f).is_absolute() else Path(f) for f in fields]
        for f in resolved:
            if not f.exists():
                raise MissingInputError(f"{path}:{lineno}: {f} not found")
        observations.append(read_fsr(resolved[0]))
        probs.append(read_fsr(resolved[1]) if len(resolved) == 2 else None)

    with_prob = [p is not None for p in probs]
    if any(with_prob) and not all(with_prob):
        raise IngestError(f"{path}: cloud probability given for some scenes but not all")
    return TimeStack(observations=observations, cloud_prob=probs if all(with_prob) and probs else None)
