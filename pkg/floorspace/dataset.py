"""
Dataset module - partitions city mosaics into training tiles, filters and
splits them deterministically, normalizes height targets and applies
training-time augmentation.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Literal, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError
from scipy import ndimage
from torch.utils.data import Dataset
from tqdm import tqdm

from .errors import AlignmentError, DatasetError, MissingInputError, ValidationError
from .ingest import BandStack, BandStats, compute_band_stats, standardize
from .raster import GeoTransform, LabelGrid, Raster
from .raster_io import read_fsr, write_fsr

logger = logging.getLogger(__name__)

MIN_TILE_SIZE = 16

BAND_SETS: Dict[str, Tuple[int, ...]] = {
    "s1s2": (0, 1, 2, 3, 4, 5),
    "s1": (0, 1),
    "s2": (2, 3, 4, 5),
}
S1_CHANNELS = (0, 1)

AUGMENT_POLICIES = ("none", "rotate", "affine", "mask_s1")


@dataclass(frozen=True)
class HeightNormalizer:
    """Maps building heights in meters to the unitless regression target"""
    mode: Literal["linear", "log"] = "linear"
    scale_m: float = 400.0
    log_cap_m: float = 400.0

    def __post_init__(self):
        if self.mode not in ("linear", "log"):
            raise ValidationError(f"unknown height normalization mode {self.mode!r}")
        if not (self.scale_m > 0 and self.log_cap_m > 0):
            raise ValidationError("normalization constants must be > 0")

    def normalize(self, h_m):
        """Meters -> normalized target (scalar or array)"""
        h = np.asarray(h_m, dtype=np.float64)
        if np.any(h < 0):
            raise ValidationError("building heights must be >= 0")
        if self.mode == "linear":
            out = h / self.scale_m
        else:
            out = np.log1p(h) / math.log1p(self.log_cap_m)
        return float(out) if out.ndim == 0 else out

    def denormalize(self, n):
        """Normalized target -> meters (exact inverse of normalize)"""
        n = np.asarray(n, dtype=np.float64)
        if self.mode == "linear":
            out = n * self.scale_m
        else:
            out = np.expm1(n * math.log1p(self.log_cap_m))
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {"mode": self.mode, "scale_m": self.scale_m, "log_cap_m": self.log_cap_m}


def normalize_height(h_m, norm: HeightNormalizer):
    return norm.normalize(h_m)


def denormalize_height(n, norm: HeightNormalizer):
    return norm.denormalize(n)


@dataclass
class Tile:
    """One T x T training patch"""
    id: str
    row: int  # tile row index in the mosaic
    col: int  # tile column index
    input: np.ndarray  # (6, T, T) float32, nodata filled with 0
    mask: np.ndarray  # (T, T) uint8
    height_norm: np.ndarray  # (T, T) float32
    validity: np.ndarray  # (T, T) uint8, 1 where every input band was valid
    transform: GeoTransform

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    @property
    def building_fraction(self) -> float:
        return float(self.mask.mean())


class NormalizationManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["linear", "log"]
    scale_m: float = Field(gt=0)
    log_cap_m: float = Field(gt=0)


class TileSetManifest(BaseModel):
    """Reproducibility record written next to the tile files"""
    model_config = ConfigDict(extra="forbid")

    city: str
    seed: int
    tile_size: int = Field(ge=MIN_TILE_SIZE)
    min_building_fraction: float = Field(ge=0, le=1)
    val_ratio: float = Field(gt=0, lt=1)
    normalization: NormalizationManifest
    band_stats: Dict[str, List[float]]
    train: List[str]
    val: List[str]
    provenance: Dict[str, Any] = Field(default_factory=dict)

    def normalizer(self) -> HeightNormalizer:
        return HeightNormalizer(**self.normalization.model_dump())

    def stats(self) -> BandStats:
        return BandStats.from_dict(self.band_stats)


@dataclass
class TileSet:
    train: List[Tile]
    val: List[Tile]
    manifest: TileSetManifest


def tile_id(city: str, row: int, col: int) -> str:
    return f"{city}_r{row:04d}_c{col:04d}"


def tile_grid(
    stack: BandStack,
    labels: LabelGrid,
    T: int,
    normalizer: HeightNormalizer = HeightNormalizer(),
    city: str = "city",
) -> List[Tile]:
    """
    Cut the mosaic into non-overlapping T x T tiles in row-major order

    Partial edge tiles are dropped. Input nodata is filled with 0 and
    recorded in the per-tile validity mask.
    """
    if T < MIN_TILE_SIZE:
        raise DatasetError(f"tile size must be >= {MIN_TILE_SIZE}, got {T}")
    raster = stack.raster
    if not raster.same_grid(labels.mask):
        raise AlignmentError(
            f"band stack grid {raster.width}x{raster.height} does not match label grid "
            f"{labels.mask.width}x{labels.mask.height}"
        )

    valid = raster.valid_mask().all(axis=0)
    filled = np.where(raster.valid_mask(), raster.data, np.float32(0)).astype(np.float32)
    height_norm = np.asarray(normalizer.normalize(labels.height_m.data[0]), dtype=np.float32)
    mask = labels.mask.data[0]

    tiles = []
    for r in range(raster.height // T):
        for c in range(raster.width // T):
            ys, xs = slice(r * T, (r + 1) * T), slice(c * T, (c + 1) * T)
            tiles.append(Tile(
                id=tile_id(city, r, c),
                row=r,
                col=c,
                input=filled[:, ys, xs].copy(),
                mask=mask[ys, xs].copy(),
                height_norm=height_norm[ys, xs].copy(),
                validity=valid[ys, xs].astype(np.uint8),
                transform=raster.transform.shifted(c * T, r * T),
            ))
    logger.debug("cut %d tiles of %dpx from %dx%d mosaic", len(tiles), T, raster.width, raster.height)
    return tiles


def filter_tiles(tiles: Sequence[Tile], min_building_fraction: float) -> List[Tile]:
    """Keep tiles whose building fraction is at least the threshold"""
    kept = [t for t in tiles if t.building_fraction >= min_building_fraction]
    logger.info("tile filter kept %d of %d tiles (building fraction >= %.3f)",
                len(kept), len(tiles), min_building_fraction)
    return kept


def _keyed_hash(tile_id_: str, seed: int) -> int:
    key = int(seed).to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(tile_id_.encode("utf-8"), key=key, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def split(tiles: Sequence[Tile], val_ratio: float, seed: int) -> Tuple[List[Tile], List[Tile]]:
    """
    Deterministic train/validation split

    Tiles are ranked by a seed-keyed hash of their id and the first
    round(val_ratio * n) go to validation, so membership depends only on
    (ids, seed), never on list order or platform.

    Returns:
        (train, val), each in the input order
    """
    if not 0 < val_ratio < 1:
        raise DatasetError(f"val_ratio must be in (0, 1), got {val_ratio}")
    if not tiles:
        raise DatasetError("cannot split an empty tile list")
    ids = [t.id for t in tiles]
    if len(set(ids)) != len(ids):
        raise DatasetError("tile ids are not unique")

    ranked = sorted(ids, key=lambda i: (_keyed_hash(i, seed), i))
    val_ids = set(ranked[:round(val_ratio * len(ids))])
    train = [t for t in tiles if t.id not in val_ids]
    val = [t for t in tiles if t.id in val_ids]
    return train, val


def _train_pixel_stats(stack: BandStack, train: Sequence[Tile]) -> BandStats:
    if not train:
        raise DatasetError("no training tiles left to compute band statistics")
    T = train[0].size
    values = np.stack([stack.raster.masked(b) for b in range(stack.raster.bands)])
    patches = [values[:, t.row * T:(t.row + 1) * T, t.col * T:(t.col + 1) * T] for t in train]
    return compute_band_stats(np.concatenate([p.reshape(p.shape[0], -1) for p in patches], axis=1))


def build_tileset(
    stack: BandStack,
    labels: LabelGrid,
    tile_size: int,
    min_building_fraction: float = 0.10,
    val_ratio: float = 0.10,
    seed: int = 0,
    normalizer: HeightNormalizer = HeightNormalizer(),
    city: str = "city",
) -> TileSet:
    """
    Tile, filter and split a raw mosaic, standardizing with train-only stats

    Args:
        stack: Unstandardized 6-band composite
        labels: Reference labels on the same grid

    Returns:
        TileSet whose manifest records every parameter and the band stats
    """
    raw_tiles = filter_tiles(tile_grid(stack, labels, tile_size, normalizer, city), min_building_fraction)
    train_raw, val_raw = split(raw_tiles, val_ratio, seed)
    stats = _train_pixel_stats(stack, train_raw)

    by_id = {t.id: t for t in tile_grid(standardize(stack, stats), labels, tile_size, normalizer, city)}
    train = [by_id[t.id] for t in train_raw]
    val = [by_id[t.id] for t in val_raw]

    manifest = TileSetManifest(
        city=city,
        seed=seed,
        tile_size=tile_size,
        min_building_fraction=min_building_fraction,
        val_ratio=val_ratio,
        normalization=NormalizationManifest(**normalizer.to_dict()),
        band_stats=stats.to_dict(),
        train=[t.id for t in train],
        val=[t.id for t in val],
    )
    logger.info("tile set: %d train / %d val tiles", len(train), len(val))
    return TileSet(train=train, val=val, manifest=manifest)


# Augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    rotate_max_deg: float = 10.0
    shear_max_deg: float = 8.0
    translate_max_fraction: float = 0.05
    mask_min_fraction: float = 0.05
    mask_max_fraction: float = 0.25


def tile_rng(seed: int, tile_id_: str, epoch: int) -> np.random.Generator:
    """Generator keyed on (seed, tile id, epoch) so workers stay reproducible"""
    return np.random.default_rng([int(seed), int(epoch), _keyed_hash(tile_id_, 0)])


def geometric_transform(
    tile: Tile,
    angle_deg: float = 0.0,
    shear_x_deg: float = 0.0,
    shear_y_deg: float = 0.0,
    shift_rows: float = 0.0,
    shift_cols: float = 0.0,
) -> Tile:
    """
    Rotate/shear/translate a tile about its center

    Input bands resample bilinearly, labels and validity by nearest
    neighbour; pixels mapped from outside the frame become 0 and invalid.
    """
    if not any((angle_deg, shear_x_deg, shear_y_deg, shift_rows, shift_cols)):
        return replace(tile, input=tile.input.copy(), mask=tile.mask.copy(),
                       height_norm=tile.height_norm.copy(), validity=tile.validity.copy())

    a = math.radians(angle_deg)
    rotation = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    shear_x = np.array([[1.0, 0.0], [math.tan(math.radians(shear_x_deg)), 1.0]])
    shear_y = np.array([[1.0, math.tan(math.radians(shear_y_deg))], [0.0, 1.0]])
    forward = rotation @ shear_x @ shear_y

    center = np.array([(tile.size - 1) / 2.0] * 2)
    shift = np.array([shift_rows, shift_cols])
    matrix = np.linalg.inv(forward)
    offset = center - matrix @ (center + shift)

    def warp(plane: np.ndarray, order: int) -> np.ndarray:
        return ndimage.affine_transform(
            plane, matrix, offset=offset, order=order, mode="constant", cval=0.0, prefilter=False
        ).astype(plane.dtype)

    return replace(
        tile,
        input=np.stack([warp(band, 1) for band in tile.input]),
        mask=warp(tile.mask, 0),
        height_norm=warp(tile.height_norm, 0),
        validity=warp(tile.validity, 0),
    )


def mask_s1(tile: Tile, rng: np.random.Generator, params: AugmentParams = AugmentParams()) -> Tile:
    """Blank one random rectangle on the SAR bands only"""
    T = tile.size
    area = rng.uniform(params.mask_min_fraction, params.mask_max_fraction) * T * T
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    h = int(np.clip(round(math.sqrt(area * aspect)), 1, T))
    w = int(np.clip(round(area / h), 1, T))
    top = int(rng.integers(0, T - h + 1))
    left = int(rng.integers(0, T - w + 1))

    masked = tile.input.copy()
    masked[list(S1_CHANNELS), top:top + h, left:left + w] = 0.0
    return replace(tile, input=masked)


def augment(
    tile: Tile,
    policy: str,
    rng: np.random.Generator,
    params: AugmentParams = AugmentParams(),
) -> Tile:
    """
    Apply one augmentation policy to a tile

    Args:
        tile: Source tile (not modified)
        policy: none | rotate | affine | mask_s1
        rng: Per-tile generator (see tile_rng)
        params: Parameter ranges
    """
    if policy == "none":
        return tile
    if policy == "rotate":
        angle = rng.uniform(-params.rotate_max_deg, params.rotate_max_deg)
        return geometric_transform(tile, angle_deg=angle)
    if policy == "affine":
        T = tile.size
        angle = rng.uniform(-params.rotate_max_deg, params.rotate_max_deg)
        shear_x, shear_y = rng.uniform(-params.shear_max_deg, params.shear_max_deg, size=2)
        dr, dc = rng.uniform(-params.translate_max_fraction, params.translate_max_fraction, size=2) * T
        return geometric_transform(tile, angle, shear_x, shear_y, dr, dc)
    if policy == "mask_s1":
        return mask_s1(tile, rng, params)
    raise ValidationError(f"unknown augmentation policy {policy!r}; choose from {AUGMENT_POLICIES}")


class TileDataset(Dataset):
    """Torch view of a tile list with per-epoch, per-tile augmentation"""

    def __init__(
        self,
        tiles: Sequence[Tile],
        band_set: str = "s1s2",
        policy: str = "none",
        seed: int = 0,
        params: AugmentParams = AugmentParams(),
    ):
        if band_set not in BAND_SETS:
            raise ValidationError(f"unknown band set {band_set!r}")
        self.tiles = list(tiles)
        self.channels = list(BAND_SETS[band_set])
        self.policy = policy
        self.seed = seed
        self.params = params
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.tiles)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, ...]:
        tile = self.tiles[index]
        if self.policy != "none":
            tile = augment(tile, self.policy, tile_rng(self.seed, tile.id, self.epoch), self.params)
        return (
            torch.from_numpy(tile.input[self.channels].astype(np.float32)),
            torch.from_numpy(tile.mask.astype(np.float32))[None],
            torch.from_numpy(tile.height_norm.astype(np.float32))[None],
            torch.from_numpy(tile.validity.astype(np.float32))[None],
        )


# Persistence ---------------------------------------------------------------

def _write_tile(tile: Tile, directory: Path):
    write_fsr(Raster(tile.input, tile.transform), directory / f"{tile.id}_input.fsr")
    labels = np.stack([tile.mask, tile.validity]).astype(np.uint8)
    write_fsr(Raster(labels, tile.transform), directory / f"{tile.id}_labels.fsr")
    write_fsr(Raster(tile.height_norm[None], tile.transform), directory / f"{tile.id}_height.fsr")


def _read_tile(tid: str, directory: Path) -> Tile:
    try:
        inputs = read_fsr(directory / f"{tid}_input.fsr")
        labels = read_fsr(directory / f"{tid}_labels.fsr")
        height = read_fsr(directory / f"{tid}_height.fsr")
    except FileNotFoundError as e:
        raise MissingInputError(f"tile file missing: {e.filename}") from None
    row, col = (int(part[1:]) for part in tid.rsplit("_", 2)[1:])
    return Tile(
        id=tid,
        row=row,
        col=col,
        input=inputs.data,
        mask=labels.data[0],
        height_norm=height.data[0],
        validity=labels.data[1],
        transform=inputs.transform,
    )


def save_tileset(tileset: TileSet, directory: Union[str, Path], progress: bool = False):
    """Write tile FSR1 files plus manifest.json"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for tile in tqdm(tileset.train + tileset.val, desc="Writing tiles", disable=not progress):
        _write_tile(tile, directory)
    (directory / "manifest.json").write_text(
        json.dumps(tileset.manifest.model_dump(), indent=2, sort_keys=True), encoding="utf-8"
    )


def load_tileset(directory: Union[str, Path]) -> TileSet:
    """Read a tile set written by save_tileset"""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise MissingInputError(f"tile set manifest not found: {manifest_path}")
    try:
        manifest = TileSetManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except PydanticValidationError as e:
        raise DatasetError(f"invalid tile set manifest {manifest_path}: {e.errors()[0]['msg']}") from None

    return TileSet(
        train=[_read_tile(t, directory) for t in manifest.train],
        val=[_read_tile(t, directory) for t in manifest.val],
        manifest=manifest,
    )
