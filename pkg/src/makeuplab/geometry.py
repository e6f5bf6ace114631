"""Per-frame face geometry: lip/eye polygons, feathered masks, training crops.

Geometry is a file input (polygons in pixel coordinates), not detected.  A
geometry document is JSON with ``image_width``, ``image_height`` and ``lips``
/ ``eyes`` entries that are either one polygon (``[[x, y], ...]``) or a list
of polygons.  A video container holds one document per frame under
``frames``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .filters import bilinear_resize, gaussian_blur
from .image import ImageBuffer

DEFAULT_FEATHER_SIGMA = 2.0
DEFAULT_CROP_EXPANSION = 0.4
DEFAULT_CROP_SIZE = 64


class GeometryError(ValueError):
    """Invalid polygon, geometry document or crop request."""


class Target(str, enum.Enum):
    """Which makeup region a render or crop applies to."""

    LIPS = "lips"
    EYES = "eyes"


Polygon = np.ndarray  # (N, 2) float64 vertex array, implicitly closed


def _as_polygon(vertices, width: int, height: int) -> Polygon:
    poly = np.asarray(vertices, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 3:
        raise GeometryError(f"polygon needs >= 3 (x, y) vertices, got shape {poly.shape}")
    if not np.all(np.isfinite(poly)):
        raise GeometryError("polygon contains non-finite vertices")
    if poly[:, 0].min() < 0 or poly[:, 0].max() > width or poly[:, 1].min() < 0 or poly[:, 1].max() > height:
        raise GeometryError(
            f"polygon vertices must lie inside [0, {width}]x[0, {height}]"
        )
    poly.setflags(write=False)
    return poly


@dataclass(frozen=True)
class FaceGeometry:
    """Lip and eye regions of one frame as closed pixel-space polygons."""

    lip_polygons: tuple[Polygon, ...]
    eye_polygons: tuple[Polygon, ...]
    image_width: int
    image_height: int

    def __post_init__(self) -> None:
        if self.image_width < 1 or self.image_height < 1:
            raise GeometryError("image dimensions must be positive")
        for field in ("lip_polygons", "eye_polygons"):
            polys = tuple(
                _as_polygon(p, self.image_width, self.image_height)
                for p in getattr(self, field)
            )
            object.__setattr__(self, field, polys)

    def polygons_for(self, target: Target) -> tuple[Polygon, ...]:
        return self.lip_polygons if target is Target.LIPS else self.eye_polygons

    def to_json_dict(self) -> dict:
        return {
            "image_width": self.image_width,
            "image_height": self.image_height,
            "lips": [p.tolist() for p in self.lip_polygons],
            "eyes": [p.tolist() for p in self.eye_polygons],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "FaceGeometry":
        try:
            width = int(doc["image_width"])
            height = int(doc["image_height"])
        except KeyError as exc:
            raise GeometryError(f"geometry document missing key {exc}") from exc
        return cls(
            lip_polygons=tuple(_parse_polygons(doc.get("lips", []))),
            eye_polygons=tuple(_parse_polygons(doc.get("eyes", []))),
            image_width=width,
            image_height=height,
        )


def _parse_polygons(entry) -> list:
    """Accept one polygon ([[x, y], ...]) or a list of polygons."""
    if not entry:
        return []
    first = entry[0]
    if len(first) == 2 and isinstance(first[0], (int, float)):
        return [entry]
    return list(entry)


def load_geometry(path: str | Path) -> FaceGeometry:
    return FaceGeometry.from_json_dict(json.loads(Path(path).read_text()))


def save_geometry(geom: FaceGeometry, path: str | Path) -> None:
    Path(path).write_text(json.dumps(geom.to_json_dict()) + "\n")


def load_geometry_sequence(path: str | Path) -> list[FaceGeometry]:
    """Load a per-frame container ({"frames": [...]}) or a single document."""
    doc = json.loads(Path(path).read_text())
    if "frames" in doc:
        return [FaceGeometry.from_json_dict(frame) for frame in doc["frames"]]
    return [FaceGeometry.from_json_dict(doc)]


def save_geometry_sequence(geoms: Sequence[FaceGeometry], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps({"frames": [g.to_json_dict() for g in geoms]}) + "\n"
    )


@dataclass(frozen=True)
class ApplicationMask:
    """Per-pixel makeup application weight in [0, 1]."""

    weights: np.ndarray  # (H, W) float32

    @property
    def width(self) -> int:
        return self.weights.shape[1]

    @property
    def height(self) -> int:
        return self.weights.shape[0]


def rasterize_mask(
    polygons: Sequence[Polygon],
    width: int,
    height: int,
    feather_sigma: float = DEFAULT_FEATHER_SIGMA,
) -> ApplicationMask:
    """Even-odd fill of the polygon union at pixel centers, then feathering.

    An empty polygon list yields an all-zero mask.  Feathering is a Gaussian
    blur with std ``feather_sigma`` pixels (skipped at 0) and treats values
    outside the frame as zero, so weights stay in [0, 1] and vanish outside
    the polygon bounding boxes plus the blur radius.
    """
    if feather_sigma < 0:
        raise GeometryError(f"feather_sigma must be >= 0, got {feather_sigma}")
    weights = np.zeros((height, width), dtype=np.float32)
    if not polygons:
        return ApplicationMask(weights)

    radius = 0 if feather_sigma == 0 else int(math.ceil(3.0 * feather_sigma))
    for poly in polygons:
        x0 = max(0, int(math.floor(poly[:, 0].min())) - 1)
        x1 = min(width, int(math.ceil(poly[:, 0].max())) + 1)
        y0 = max(0, int(math.floor(poly[:, 1].min())) - 1)
        y1 = min(height, int(math.ceil(poly[:, 1].max())) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        inside = _even_odd_fill(poly, x0, x1, y0, y1)
        np.logical_or(
            weights[y0:y1, x0:x1], inside, out=weights[y0:y1, x0:x1], casting="unsafe"
        )

    if feather_sigma > 0:
        # Blur only a window around the support; outside is zero either way.
        ys, xs = np.nonzero(weights)
        if len(ys):
            y0 = max(0, ys.min() - radius)
            y1 = min(height, ys.max() + 1 + radius)
            x0 = max(0, xs.min() - radius)
            x1 = min(width, xs.max() + 1 + radius)
            window = gaussian_blur(weights[y0:y1, x0:x1], feather_sigma)
            weights[y0:y1, x0:x1] = window
        np.clip(weights, 0.0, 1.0, out=weights)
    return ApplicationMask(weights)


def _even_odd_fill(poly: Polygon, x0: int, x1: int, y0: int, y1: int) -> np.ndarray:
    """Crossing-number inside test at pixel centers of the given window."""
    px = np.arange(x0, x1, dtype=np.float64) + 0.5
    py = (np.arange(y0, y1, dtype=np.float64) + 0.5)[:, None]
    inside = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    n = poly.shape[0]
    for i in range(n):
        xa, ya = poly[i]
        xb, yb = poly[(i + 1) % n]
        if ya == yb:
            continue
        crosses = (ya > py) != (yb > py)
        x_at = (xb - xa) * (py - ya) / (yb - ya) + xa
        inside ^= crosses & (px[None, :] < x_at)
    return inside


@dataclass(frozen=True)
class CropSpec:
    """Integer crop rectangle plus the square output size it resizes to."""

    origin_x: int
    origin_y: int
    width: int
    height: int
    target_size: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise GeometryError("crop rectangle must be non-empty")
        if self.target_size < 8:
            raise GeometryError(f"target_size must be >= 8, got {self.target_size}")


def compute_crop_spec(
    polygons: Sequence[Polygon],
    expansion: float,
    image_width: int,
    image_height: int,
    target_size: int,
) -> CropSpec:
    """Expanded, clamped integer bounding rectangle of all polygon vertices.

    The float bounding box grows by ``expansion`` of its width/height on each
    side, then rounds outward (floor/ceil) and clamps to the image.
    """
    if not polygons:
        raise GeometryError("no region")
    if expansion < 0:
        raise GeometryError(f"expansion must be >= 0, got {expansion}")
    vertices = np.concatenate([np.asarray(p) for p in polygons], axis=0)
    min_x, min_y = vertices.min(axis=0)
    max_x, max_y = vertices.max(axis=0)
    pad_x = expansion * (max_x - min_x)
    pad_y = expansion * (max_y - min_y)
    x0 = max(0, int(math.floor(min_x - pad_x)))
    y0 = max(0, int(math.floor(min_y - pad_y)))
    x1 = min(image_width, int(math.ceil(max_x + pad_x)))
    y1 = min(image_height, int(math.ceil(max_y + pad_y)))
    # Degenerate polygons (all vertices on one line at an image edge) still
    # need a 1px rectangle.
    if x1 <= x0:
        x1 = min(image_width, x0 + 1) if x0 < image_width else image_width
        x0 = x1 - 1
    if y1 <= y0:
        y1 = min(image_height, y0 + 1) if y0 < image_height else image_height
        y0 = y1 - 1
    return CropSpec(x0, y0, x1 - x0, y1 - y0, target_size)


def crop_region(
    image: ImageBuffer,
    polygons: Sequence[Polygon],
    expansion: float = DEFAULT_CROP_EXPANSION,
    target_size: int = DEFAULT_CROP_SIZE,
) -> ImageBuffer:
    """Crop the expanded polygon bounding box and resize to a square.

    Bilinear resampling; an already target-sized rectangle copies bit-exactly.
    """
    spec = compute_crop_spec(polygons, expansion, image.width, image.height, target_size)
    return apply_crop_spec(image, spec)


def apply_crop_spec(image: ImageBuffer, spec: CropSpec) -> ImageBuffer:
    sub = image.pixels[
        spec.origin_y : spec.origin_y + spec.height,
        spec.origin_x : spec.origin_x + spec.width,
    ]
    return ImageBuffer(bilinear_resize(sub, spec.target_size, spec.target_size))
