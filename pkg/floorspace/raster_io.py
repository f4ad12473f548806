"""
FSR1 raster container.

Layout (little-endian):
    magic "FSR1" | u32 width | u32 height | u32 bands | u32 dtype code
    | f64 nodata | 6 x f64 geotransform (origin_x, pixel_w, 0, origin_y, 0, pixel_h)
    | payload, band-major then row-major
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedPayloadError, UnknownDtypeError
from .raster import GeoTransform, Raster

logger = logging.getLogger(__name__)

MAGIC = b"FSR1"
HEADER = struct.Struct("<4sIIIId6d")

DTYPE_CODES = {"float32": 0, "uint8": 1}
CODE_DTYPES = {code: np.dtype(name).newbyteorder("<") for name, code in DTYPE_CODES.items()}


def encode_fsr(raster: Raster) -> bytes:
    """Serialize a raster to FSR1 bytes"""
    raster.validate()
    t = raster.transform
    header = HEADER.pack(
        MAGIC,
        raster.width,
        raster.height,
        raster.bands,
        DTYPE_CODES[raster.dtype],
        raster.nodata,
        t.origin_x, t.pixel_w, 0.0, t.origin_y, 0.0, t.pixel_h,
    )
    payload = np.ascontiguousarray(raster.data, dtype=CODE_DTYPES[DTYPE_CODES[raster.dtype]])
    return header + payload.tobytes()


def decode_fsr(blob: bytes) -> Raster:
    """Parse FSR1 bytes into a raster"""
    if blob[:4] != MAGIC:
        raise BadMagicError(f"not an FSR1 raster (magic {blob[:4]!r})")
    if len(blob) < HEADER.size:
        raise TruncatedPayloadError(f"header truncated: {len(blob)} of {HEADER.size} bytes")

    _, width, height, bands, code, nodata, ox, pw, rot1, oy, rot2, ph = HEADER.unpack_from(blob)
    if code not in CODE_DTYPES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    if rot1 != 0.0 or rot2 != 0.0:
        raise FormatError("rotated geotransforms are not supported")

    dtype = CODE_DTYPES[code]
    expected = width * height * bands * dtype.itemsize
    payload = blob[HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload truncated: {len(payload)} bytes, expected {expected}"
        )
    if len(payload) > expected:
        raise FormatError(f"{len(payload) - expected} trailing bytes after payload")

    data = np.frombuffer(payload, dtype=dtype).reshape(bands, height, width)
    return Raster(
        data=data.astype(dtype.newbyteorder("="), copy=True),
        transform=GeoTransform(origin_x=ox, origin_y=oy, pixel_w=pw, pixel_h=ph),
        nodata=nodata,
    )


def write_fsr(raster: Raster, path: Union[str, Path]):
    """Write a raster as an FSR1 file (parent directories created)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_fsr(raster))
    logger.debug("wrote %s (%dx%dx%d %s)", path, raster.width, raster.height, raster.bands, raster.dtype)


def read_fsr(path: Union[str, Path]) -> Raster:
    """Read an FSR1 file"""
    return decode_fsr(Path(path).read_bytes())
