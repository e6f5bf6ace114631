"""Real-valued RGB raster type and 8-bit PNG I/O.

All rendering and metrics operate on ``ImageBuffer``: float32 RGB with every
channel in [0, 1], row-major (H, W, 3).  PNG conversion is value/255 on load
and round(value*255) on save, so a load/save round trip is lossless.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ImageError(ValueError):
    """Invalid raster shape, range or encoding."""


@dataclass(frozen=True)
class ImageBuffer:
    """RGB raster in [0, 1].  Treat ``pixels`` as immutable."""

    pixels: np.ndarray  # (H, W, 3) float32

    def __post_init__(self) -> None:
        px = self.pixels
        if not isinstance(px, np.ndarray) or px.ndim != 3 or px.shape[2] != 3:
            raise ImageError(f"pixels must be an (H, W, 3) array, got {getattr(px, 'shape', None)}")
        if px.dtype != np.float32:
            raise ImageError(f"pixels must be float32, got {px.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_array(cls, arr: np.ndarray, copy: bool = True) -> "ImageBuffer":
        """Validate range and wrap an array (copied by default)."""
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ImageError(f"expected (H, W, 3) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ImageError("image contains non-finite values")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ImageError("image channels must lie in [0, 1]")
        out = arr.astype(np.float32, copy=copy)
        return cls(out)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "ImageBuffer":
        arr = np.asarray(arr)
        if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
            raise ImageError(f"expected (H, W, 3) uint8 array, got {arr.dtype} {arr.shape}")
        return cls((arr.astype(np.float32) / 255.0))

    def to_uint8(self) -> np.ndarray:
        return np.rint(self.pixels * 255.0).astype(np.uint8)

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.pixels.copy())


def load_png(path: str | Path) -> ImageBuffer:
    with Image.open(path) as im:
        return ImageBuffer.from_uint8(np.asarray(im.convert("RGB")))


def decode_png(data: bytes) -> ImageBuffer:
    with Image.open(io.BytesIO(data)) as im:
        return ImageBuffer.from_uint8(np.asarray(im.convert("RGB")))


def png_dimensions(data: bytes) -> tuple[int, int]:
    """(width, height) from the header, without decoding pixel data."""
    with Image.open(io.BytesIO(data)) as im:
        return im.size


def save_png(image: ImageBuffer, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(image))


def encode_png(image: ImageBuffer) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.to_uint8(), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()
