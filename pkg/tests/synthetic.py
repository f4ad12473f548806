"""
Synthetic city builders: random rectangular buildings, a 6-band stack whose
bands encode footprint and height, and on-disk layouts for the CLI tests.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from floorspace.ingest import BandStack
from floorspace.raster import BuildingPolygon, GeoTransform, LabelGrid, Raster, rasterize
from floorspace.raster_io import write_fsr

PIXEL_M = 10.0


@dataclass
class City:
    polygons: List[BuildingPolygon]
    labels: LabelGrid
    stack: BandStack

    @property
    def transform(self) -> GeoTransform:
        return self.stack.raster.transform


def grid(width: int, height: int) -> GeoTransform:
    return GeoTransform(origin_x=500000.0, origin_y=2500000.0 + height * PIXEL_M, pixel_w=PIXEL_M, pixel_h=-PIXEL_M)


def rectangle(transform: GeoTransform, col: int, row: int, w: int, h: int, height_m: float) -> BuildingPolygon:
    """Pixel-aligned rectangle covering columns [col, col+w) and rows [row, row+h)"""
    x0 = transform.origin_x + col * transform.pixel_w
    x1 = x0 + w * transform.pixel_w
    y0 = transform.origin_y + row * transform.pixel_h
    y1 = y0 + h * transform.pixel_h
    return BuildingPolygon(exterior=[(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)], height_m=height_m)


def make_city(width: int = 64, height: int = 64, n_buildings: int = 12, seed: int = 0, noise: float = 0.01) -> City:
    """
    Random rectangular buildings (6-60 m) and a 6-band stack whose first
    band encodes the footprint and second band the height
    """
    rng = np.random.default_rng(seed)
    transform = grid(width, height)
    polygons = []
    for _ in range(n_buildings):
        w, h = (int(v) for v in rng.integers(3, 10, size=2))
        col = int(rng.integers(0, width - w))
        row = int(rng.integers(0, height - h))
        polygons.append(rectangle(transform, col, row, w, h, float(rng.uniform(6.0, 60.0))))
    labels = rasterize(polygons, transform, width, height)

    mask = labels.mask.data[0].astype(np.float64)
    h_m = labels.height_m.data[0].astype(np.float64)
    bands = [
        mask,
        h_m / 60.0,
        0.5 * mask + 0.2,
        0.3 * mask + 0.1,
        0.8 - 0.4 * mask,
        0.2 + h_m / 120.0,
    ]
    data = np.stack([b + noise * rng.standard_normal(b.shape) for b in bands]).astype(np.float32)
    return City(polygons=polygons, labels=labels, stack=BandStack(Raster(data, transform)))


def geojson(polygons: List[BuildingPolygon]) -> dict:
    return {
        "type": "FeatureCollection",
        "features": [
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [[list(p) for p in poly.exterior]]},
                "properties": {"height": poly.height_m},
            }
            for poly in polygons
        ],
    }


def write_city(city: City, directory: Path) -> dict:
    """stack.fsr, buildings.geojson and labels/{mask,height}.fsr under directory"""
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "stack": directory / "stack.fsr",
        "buildings": directory / "buildings.geojson",
        "labels": directory / "labels",
    }
    write_fsr(city.stack.raster, paths["stack"])
    paths["buildings"].write_text(json.dumps(geojson(city.polygons)), encoding="utf-8")
    write_fsr(city.labels.mask, paths["labels"] / "mask.fsr")
    write_fsr(city.labels.height_m, paths["labels"] / "height.fsr")
    return paths


