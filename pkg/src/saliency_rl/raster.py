"""Raster masks, binary PGM (P5) I/O and pixel-level set operations."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

__all__ = [
    "GrayMask",
    "BinaryMask",
    "PGMError",
    "DimensionError",
    "load_mask",
    "save_mask",
    "binarize",
    "union",
    "iou",
    "as_pixels",
    "zeros_like",
    "BINARY_INGEST_THRESHOLD",
]

# Byte 128 and below read as background when a stored map is treated as binary.
BINARY_INGEST_THRESHOLD = 128 / 255


class PGMError(ValueError):
    """Malformed or unsupported PGM file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int, path: str | None = None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte {offset})")


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GrayMask:
    """A single-channel map with intensities in [0, 1], stored as an (H, W) array."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("mask width and height must be positive")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_flat(cls, width: int, height: int, values: Iterable[float]):
        flat = np.asarray(list(values), dtype=np.float64)
        if flat.size != width * height:
            raise ValueError(f"expected {width * height} values, got {flat.size}")
        return cls(flat.reshape(height, width))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def flat(self) -> list[float]:
        return self.values.ravel().tolist()

    def to_gray(self) -> "GrayMask":
        return GrayMask(self.values)

    def __eq__(self, other):
        if not isinstance(other, GrayMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.shape, self.values.tobytes()))

    def __repr__(self):
        return f"{type(self).__name__}({self.width}x{self.height}, mean={self.values.mean():.4f})"


class BinaryMask(GrayMask):
    """A GrayMask whose values are exactly 0 or 1."""

    def __post_init__(self):
        super().__post_init__()
        v = self.values
        if not np.all((v == 0.0) | (v == 1.0)):
            raise ValueError("binary mask values must be exactly 0 or 1")

    @classmethod
    def from_bool(cls, arr) -> "BinaryMask":
        return cls(np.asarray(arr, dtype=bool).astype(np.float64))

    def as_bool(self) -> np.ndarray:
        return self.values > 0.5

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.values))


MaskLike = Union[GrayMask, np.ndarray]


def as_pixels(mask: MaskLike) -> np.ndarray:
    """Return the float64 pixel array of a mask or array-like."""
    if isinstance(mask, GrayMask):
        return mask.values
    return np.asarray(mask, dtype=np.float64)


def zeros_like(mask: MaskLike) -> BinaryMask:
    return BinaryMask(np.zeros(as_pixels(mask).shape))


def check_same_shape(*masks: MaskLike) -> tuple[int, int]:
    shapes = {as_pixels(m).shape for m in masks}
    if len(shapes) != 1:
        raise DimensionError(f"mask dimensions differ: {sorted(shapes)}")
    return shapes.pop()


# --- PGM I/O -----------------------------------------------------------------

_WHITESPACE = frozenset(b" \t\r\n\v\f")


def _read_header_token(data: bytes, pos: int, path: str) -> tuple[bytes, int]:
    # Skips whitespace and '#' comments, then reads one token.
    n = len(data)
    while pos < n:
        ch = data[pos]
        if ch in _WHITESPACE:
            pos += 1
        elif ch == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise PGMError("malformed header: unexpected end of file", pos, path)
    start = pos
    while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
        pos += 1
    return data[start:pos], start


def _header_int(data: bytes, pos: int, field: str, path: str) -> tuple[int, int, int]:
    """(value, token start, token end) of the next header integer."""
    token, start = _read_header_token(data, pos, path)
    if not token.isdigit():
        raise PGMError(f"malformed header: {field} is not a decimal integer ({token!r})", start, path)
    return int(token), start, start + len(token)


def load_mask(path: str | os.PathLike) -> GrayMask:
    """Read a binary PGM (P5, maxval 255). Byte ``b`` becomes intensity ``b / 255``."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 2:
        raise PGMError("malformed header: file too short", 0, path)
    magic = data[:2]
    if magic != b"P5":
        raise PGMError(f"unsupported format (magic {magic!r}, expected b'P5')", 0, path)
    pos = 2
    if len(data) > 2 and data[2] not in _WHITESPACE and data[2] != ord("#"):
        raise PGMError("malformed header: missing whitespace after magic", 2, path)
    width, width_start, pos = _header_int(data, pos, "width", path)
    height, _, pos = _header_int(data, pos, "height", path)
    maxval, maxval_start, pos = _header_int(data, pos, "maxval", path)
    if width < 1 or height < 1:
        raise PGMError(f"malformed header: non-positive dimensions {width}x{height}", width_start, path)
    if maxval != 255:
        raise PGMError(f"unsupported maxval {maxval} (only 255 is accepted)", maxval_start, path)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise PGMError("malformed header: missing single whitespace before raster", pos, path)
    pos += 1
    expected = width * height
    payload = data[pos : pos + expected]
    if len(payload) < expected:
        raise PGMError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}", pos + len(payload), path
        )
    raster = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GrayMask(raster.astype(np.float64) / 255.0)


def quantize(mask: MaskLike) -> np.ndarray:
    """Bytes written for a mask: floor(v * 255 + 0.5)."""
    return np.floor(as_pixels(mask) * 255.0 + 0.5).astype(np.uint8)


def save_mask(mask: MaskLike, path: str | os.PathLike) -> None:
    raster = quantize(mask)
    height, width = raster.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    with open(os.fspath(path), "wb") as fh:
        fh.write(header)
        fh.write(raster.tobytes())


# --- pixel operations --------------------------------------------------------


def binarize(mask: MaskLike, threshold: float) -> BinaryMask:
    """Foreground wherever the value is strictly greater than ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return BinaryMask.from_bool(as_pixels(mask) > threshold)


def union(masks: list[BinaryMask]) -> BinaryMask:
    """Pixel-wise logical OR."""
    if not masks:
        raise ValueError("union of an empty list is undefined")
    check_same_shape(*masks)
    out = np.zeros(as_pixels(masks[0]).shape, dtype=bool)
    for m in masks:
        out |= as_pixels(m) > 0.5
    return BinaryMask.from_bool(out)


def iou(a: MaskLike, b: MaskLike) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    check_same_shape(a, b)
    x = as_pixels(a) > 0.5
    y = as_pixels(b) > 0.5
    inter = np.count_nonzero(x & y)
    uni = np.count_nonzero(x | y)
    if uni == 0:
        return 1.0
    return inter / uni
