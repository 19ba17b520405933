"""Raster value types, the WSLR binary format, median compositing and PNG export.

WSLR layout (little-endian)::

    magic   4s   b"WSLR"
    version u16  1
    bands   u16
    height  u32
    width   u32
    nodata  f32
    data    f32[bands * height * width]   band-sequential, row-major
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from PIL import Image

MAGIC = b"WSLR"
VERSION = 1
_HEADER = struct.Struct("<4sHHII4s")
# Largest element count accepted from a header; guards against absurd allocations.
MAX_ELEMENTS = 1 << 31

NON_FOREST = 0
FOREST = 1
UNLABELED = 255
CLASS_CODES = (NON_FOREST, FOREST, UNLABELED)

PALETTE = {
    NON_FOREST: (210, 180, 140),
    FOREST: (0, 100, 0),
    UNLABELED: (128, 128, 128),
}


class RasterFormatError(ValueError):
    """Raised when a WSLR file is malformed."""


def _nodata_mask(data: np.ndarray, nodata: np.float32) -> np.ndarray:
    # NaN sentinels never compare equal, so detect them by class, not value.
    if np.isnan(nodata):
        return np.isnan(data)
    return data == nodata


@dataclass(frozen=True, eq=False)
class Raster:
    """Multi-band float32 image, stored as a ``(bands, height, width)`` array.

    For SAR inputs band 0 is VV and band 1 is VH, both in dB.
    """

    data: np.ndarray
    nodata: np.float32 = np.float32("nan")

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"raster data must be (bands, height, width), got {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "nodata", np.float32(self.nodata))

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def nodata_mask(self) -> np.ndarray:
        return _nodata_mask(self.data, self.nodata)

    def valid(self) -> bool:
        """True when every value is finite or the nodata sentinel."""
        return bool(np.all(np.isfinite(self.data) | self.nodata_mask()))


@dataclass(frozen=True, eq=False)
class ClassMap:
    """Per-pixel class grid with codes non-forest=0, forest=1, unlabeled=255."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise ValueError(f"class map must be 2-D, got shape {arr.shape}")
        bad = ~np.isin(arr, CLASS_CODES)
        if bad.any():
            raise ValueError(f"class map contains codes outside {CLASS_CODES}: {np.unique(arr[bad])[:5]}")
        arr = np.array(arr, dtype=np.uint8, order="C")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def is_dense(self) -> bool:
        return not bool(np.any(self.values == UNLABELED))

    def to_raster(self) -> Raster:
        return Raster(self.values.astype(np.float32)[None])

    @classmethod
    def from_raster(cls, raster: Raster) -> "ClassMap":
        if raster.bands != 1:
            raise ValueError(f"class map raster must have one band, got {raster.bands}")
        return cls(raster.data[0])


def median_composite(stack: Sequence[Raster]) -> Raster:
    """Per-band, per-pixel median over a stack of co-registered rasters.

    Nodata entries are ignored. Pixels that are nodata in every entry stay
    nodata. An even number of valid entries yields the mean of the two middle
    values.
    """
    if len(stack) == 0:
        raise ValueError("median_composite needs at least one raster")
    shape = stack[0].data.shape
    for r in stack[1:]:
        if r.data.shape != shape:
            raise ValueError(f"raster shape mismatch in stack: {r.data.shape} vs {shape}")
    cube = np.empty((len(stack),) + shape, dtype=np.float64)
    for i, r in enumerate(stack):
        cube[i] = np.where(r.nodata_mask(), np.nan, r.data)
    nodata = stack[0].nodata
    all_missing = np.all(np.isnan(cube), axis=0)
    filled = np.where(all_missing[None], 0.0, cube)
    med = np.nanmedian(filled, axis=0).astype(np.float32)
    med[all_missing] = np.float32(nodata)
    return Raster(med, nodata=nodata)


def write_raster(raster: Raster, path: str | os.PathLike) -> None:
    nodata = np.array([raster.nodata], dtype="<f4").tobytes()
    header = _HEADER.pack(MAGIC, VERSION, raster.bands, raster.height, raster.width, nodata)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raster.data.astype("<f4", copy=False).tobytes(order="C"))


def read_raster(path: str | os.PathLike) -> Raster:
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_raster(blob)


def decode_raster(blob: bytes) -> Raster:
    if len(blob) < _HEADER.size:
        raise RasterFormatError(f"truncated header: {len(blob)} < {_HEADER.size} bytes")
    magic, version, bands, height, width, nodata_bits = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise RasterFormatError(f"unsupported WSLR version {version}")
    if bands == 0 or height == 0 or width == 0:
        raise RasterFormatError(f"zero dimension in header: {bands}x{height}x{width}")
    count = bands * height * width
    if count > MAX_ELEMENTS:
        raise RasterFormatError(f"dimension overflow: {bands}x{height}x{width} elements")
    nodata = np.frombuffer(nodata_bits, dtype="<f4")[0]
    expected = _HEADER.size + 4 * count
    if len(blob) < expected:
        raise RasterFormatError(
            f"truncated data: header declares {count} values, file holds {(len(blob) - _HEADER.size) // 4}"
        )
    if len(blob) > expected:
        raise RasterFormatError(f"trailing bytes after data: {len(blob) - expected}")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=_HEADER.size)
    return Raster(data.reshape(bands, height, width), nodata=nodata)


def raster_bytes_equal(a: Raster, b: Raster) -> bool:
    """Bitwise equality of data and nodata, NaN payloads included."""
    return (
        a.data.shape == b.data.shape
        and a.data.tobytes() == b.data.tobytes()
        and a.nodata.tobytes() == b.nodata.tobytes()
    )


def write_classmap(cmap: ClassMap, path: str | os.PathLike) -> None:
    write_raster(cmap.to_raster(), path)


def read_classmap(path: str | os.PathLike) -> ClassMap:
    return ClassMap.from_raster(read_raster(path))


def export_png(cmap: ClassMap, path: str | os.PathLike) -> None:
    """Render a class map as an 8-bit palette PNG with the fixed colour table."""
    if cmap.values.size == 0:
        raise ValueError("cannot export an empty class map")
    index = np.zeros(cmap.values.shape, dtype=np.uint8)
    palette: list[int] = []
    for i, code in enumerate(CLASS_CODES):
        index[cmap.values == code] = i
        palette.extend(PALETTE[code])
    img = Image.fromarray(index, mode="P")
    img.putpalette(palette)
    try:
        img.save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise OSError(f"cannot write PNG to {path}: {exc}") from exc
