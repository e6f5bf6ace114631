"""Portrait inputs: file loading and a procedural fallback corpus.

Real use feeds user-supplied photos plus geometry documents.  The synthetic
generator exists so dataset generation, training and profiling run with zero
external data: gradient skin, parametric mouth with shaded lips and a
specular band (so gloss and reflection leave a visible, learnable trace),
and almond eye regions.  Generated images are quantized to the 8-bit grid,
making them identical to their PNG round trip.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import FaceGeometry, load_geometry, save_geometry
from .image import ImageBuffer, load_png, save_png


@dataclass(frozen=True)
class Portrait:
    """A source image, its geometry, and a stable identifier."""

    id: str
    image: ImageBuffer
    geometry: FaceGeometry


class PortraitError(ValueError):
    pass


def load_portrait_dir(directory: str | Path) -> list[Portrait]:
    """Load every ``<name>.png`` + ``<name>.json`` pair in a directory."""
    directory = Path(directory)
    portraits = []
    for png in sorted(directory.glob("*.png")):
        geom_path = png.with_suffix(".json")
        if not geom_path.exists():
            continue
        portraits.append(
            Portrait(id=png.stem, image=load_png(png), geometry=load_geometry(geom_path))
        )
    if not portraits:
        raise PortraitError(f"no portrait (png + json) pairs found in {directory}")
    return portraits


def save_portrait(portrait: Portrait, directory: str | Path) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image_path = directory / f"{portrait.id}.png"
    geom_path = directory / f"{portrait.id}.json"
    save_png(portrait.image, image_path)
    save_geometry(portrait.geometry, geom_path)
    return image_path, geom_path


def _mouth_polygon(
    cx: float, cy: float, half_w: float, upper_h: float, lower_h: float, bow: float
) -> np.ndarray:
    """Closed mouth outline: cupid's-bow upper lip, rounded lower lip."""
    t = np.linspace(-1.0, 1.0, 17)
    upper_y = cy - upper_h * (1.0 - t * t) * (1.0 - bow * np.exp(-((t / 0.28) ** 2)))
    upper = np.stack([cx + half_w * t, upper_y], axis=1)
    t_back = t[::-1][1:-1]
    lower = np.stack(
        [cx + half_w * t_back, cy + lower_h * (1.0 - t_back * t_back) ** 0.8], axis=1
    )
    return np.concatenate([upper, lower], axis=0)


def _almond_polygon(cx: float, cy: float, half_w: float, half_h: float) -> np.ndarray:
    t = np.linspace(0.0, 2.0 * np.pi, 14, endpoint=False)
    return np.stack([cx + half_w * np.cos(t), cy + half_h * np.sin(t)], axis=1)


def _fill_polygon(poly: np.ndarray, width: int, height: int) -> np.ndarray:
    from .geometry import rasterize_mask

    return rasterize_mask([poly], width, height, feather_sigma=0.0).weights.astype(bool)


def synthetic_portrait(seed: int, width: int = 256, height: int = 256) -> Portrait:
    """One procedural portrait, deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([77_1203, seed]))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    u = xx / width
    v = yy / height

    # Skin: seeded tone with a soft top-lit gradient and slight left/right tilt.
    tone = np.array(
        [
            0.55 + 0.30 * rng.random(),
            0.42 + 0.26 * rng.random(),
            0.34 + 0.24 * rng.random(),
        ]
    )
    tilt = rng.uniform(-0.12, 0.12)
    shade = 1.05 - 0.25 * v + tilt * (u - 0.5)
    img = tone[None, None, :] * shade[..., None]

    # Mouth placement and shape.
    cx = width * rng.uniform(0.42, 0.58)
    cy = height * rng.uniform(0.66, 0.76)
    half_w = width * rng.uniform(0.16, 0.23)
    upper_h = half_w * rng.uniform(0.30, 0.42)
    lower_h = half_w * rng.uniform(0.38, 0.55)
    bow = rng.uniform(0.15, 0.45)
    mouth = _mouth_polygon(cx, cy, half_w, upper_h, lower_h, bow)
    lip_mask = _fill_polygon(mouth, width, height)

    # Bare-lip color: desaturated rosy tone times a vertical shading field,
    # darkened along the mouth seam, brightened by a specular band on the
    # lower lip.  The band keeps gloss/reflection parameters identifiable.
    lip_tone = np.array(
        [
            0.52 + 0.18 * rng.random(),
            0.33 + 0.12 * rng.random(),
            0.31 + 0.10 * rng.random(),
        ]
    )
    rel_y = (yy - cy) / max(lower_h, 1e-6)
    lip_shade = 0.78 + 0.30 * np.clip(rel_y, -1.2, 1.2)
    seam = np.exp(-((yy - cy) / (0.16 * lower_h + 1.5)) ** 2)
    lip_shade = lip_shade * (1.0 - 0.45 * seam)
    band_y = cy + lower_h * rng.uniform(0.30, 0.55)
    band = np.exp(-(((yy - band_y) / (0.22 * lower_h + 1.0)) ** 2)) * np.exp(
        -(((xx - cx) / (0.55 * half_w)) ** 2)
    )
    lip_shade = lip_shade + rng.uniform(0.55, 0.95) * band
    lip_rgb = np.clip(lip_tone[None, None, :] * lip_shade[..., None], 0.0, 1.0)
    img = np.where(lip_mask[..., None], lip_rgb, img)

    # Eyes: darker almonds with a lid fold line above each.
    eye_y = height * rng.uniform(0.38, 0.44)
    eye_dx = width * rng.uniform(0.16, 0.20)
    eye_w = width * rng.uniform(0.07, 0.10)
    eye_h = eye_w * rng.uniform(0.42, 0.55)
    eye_polys = []
    for side in (-1.0, 1.0):
        poly = _almond_polygon(cx + side * eye_dx, eye_y, eye_w, eye_h)
        poly[:, 0] = np.clip(poly[:, 0], 0, width)
        poly[:, 1] = np.clip(poly[:, 1], 0, height)
        eye_polys.append(poly)
        eye_mask = _fill_polygon(poly, width, height)
        iris = 0.10 + 0.25 * rng.random()
        img = np.where(eye_mask[..., None], [[[iris, iris * 0.9, iris * 0.8]]], img)

    # Fine grain so crops carry texture.
    img = img + rng.normal(0.0, 0.012, size=img.shape)

    mouth_clamped = mouth.copy()
    mouth_clamped[:, 0] = np.clip(mouth_clamped[:, 0], 0, width)
    mouth_clamped[:, 1] = np.clip(mouth_clamped[:, 1], 0, height)

    image = ImageBuffer.from_array(np.clip(img, 0.0, 1.0))
    image = ImageBuffer.from_uint8(image.to_uint8())  # pin to the 8-bit grid
    geometry = FaceGeometry(
        lip_polygons=(mouth_clamped,),
        eye_polygons=tuple(eye_polys),
        image_width=width,
        image_height=height,
    )
    return Portrait(id=f"synthetic_{seed:04d}", image=image, geometry=geometry)


def synthetic_corpus(
    count: int, seed: int = 0, width: int = 256, height: int = 256
) -> list[Portrait]:
    if count < 1:
        raise PortraitError(f"corpus size must be >= 1, got {count}")
    return [synthetic_portrait(seed * 100_000 + i, width, height) for i in range(count)]
