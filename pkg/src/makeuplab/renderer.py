"""Deterministic 2D makeup compositing engine.

A render is four passes under a feathered application mask:

  1. per-frame highlight estimation from the source luminance (quantile
     thresholded inside the mask),
  2. recoloring that preserves the region's shading (per-pixel luminance
     ratio against the masked mean),
  3. an additive gloss term driven by the highlight map raised to a
     roughness-controlled exponent,
  4. an additive reflection bloom: the blurred highlight map.

Every pass is pure and clamped to [0, 1]; pixels with zero mask weight are
bit-identical to the source.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .filters import gaussian_blur
from .geometry import (
    DEFAULT_FEATHER_SIGMA,
    ApplicationMask,
    FaceGeometry,
    Target,
    rasterize_mask,
)
from .image import ImageBuffer
from .params import GraphicsParams

logger = logging.getLogger(__name__)

# Rec.601 luma coefficients; fixed so shading and highlight tests are exact.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

HIGHLIGHT_QUANTILE = 0.95
SHADING_CLAMP = 2.0
GLOSS_EXPONENT_SPAN = 32.0
REFLECTION_BLUR_SIGMA = 4.0

# Luminance this small means the masked region is essentially black and the
# shading ratio would explode; fall back to flat shading.
MIN_MEAN_LUMINANCE = 1e-3

NEAR_EMPTY_WEIGHT = 0.01

PROFILE_STAGES = ("mask", "highlight", "recolor", "gloss", "reflection", "total")


class RenderError(ValueError):
    """Inconsistent render request."""


@dataclass(frozen=True)
class HighlightMap:
    """Estimated specular response inside the mask, in [0, 1]."""

    values: np.ndarray  # (H, W) float32


@dataclass(frozen=True)
class RenderRequest:
    source: ImageBuffer
    geometry: FaceGeometry
    params: GraphicsParams
    target: Target = Target.LIPS
    user_intensity: float = 1.0
    feather_sigma: float = DEFAULT_FEATHER_SIGMA

    def __post_init__(self) -> None:
        if not 0.0 <= self.user_intensity <= 1.0:
            raise RenderError(f"user_intensity must be in [0, 1], got {self.user_intensity}")
        if (
            self.geometry.image_width != self.source.width
            or self.geometry.image_height != self.source.height
        ):
            raise RenderError(
                f"geometry is {self.geometry.image_width}x{self.geometry.image_height} "
                f"but source is {self.source.width}x{self.source.height}"
            )


def luminance(pixels: np.ndarray) -> np.ndarray:
    r, g, b = LUMA_WEIGHTS
    return (
        r * pixels[..., 0] + g * pixels[..., 1] + b * pixels[..., 2]
    ).astype(np.float32)


def estimate_highlight(
    source: ImageBuffer,
    mask: ApplicationMask,
    quantile: float = HIGHLIGHT_QUANTILE,
) -> HighlightMap:
    """Luminance above the masked-region quantile, rescaled to [0, 1].

    The quantile is the linear-interpolation quantile of luminance over
    pixels with mask weight > 0.5.  A near-empty mask (all weights <= 0.01)
    yields an all-zero map.
    """
    if not 0.0 < quantile < 1.0:
        raise RenderError(f"quantile must be in (0, 1), got {quantile}")
    weights = mask.weights
    lum = luminance(source.pixels)
    core = lum[weights > 0.5]
    if core.size == 0:
        if not np.any(weights > NEAR_EMPTY_WEIGHT):
            logger.warning("highlight estimation: mask is (near) empty, returning zeros")
            return HighlightMap(np.zeros_like(lum))
        core = lum[weights > NEAR_EMPTY_WEIGHT]
    q = float(np.quantile(core.astype(np.float64), quantile))
    if q >= 1.0:
        return HighlightMap(np.zeros_like(lum))
    values = np.clip((lum - np.float32(q)) / np.float32(1.0 - q), 0.0, 1.0)
    return HighlightMap(values * weights)


def recolor(
    source: ImageBuffer,
    mask: ApplicationMask,
    params: GraphicsParams,
    user_intensity: float = 1.0,
) -> ImageBuffer:
    """Blend the target color over the mask, preserving the region's shading.

    Shading is the per-pixel luminance ratio against the mask-weighted mean
    luminance of the region, clamped to [0, 2]; a nearly black region (mean
    luminance < 1e-3) uses flat shading.
    """
    alpha = np.float32(params.opacity * user_intensity)
    if alpha == 0.0:
        return source.copy()
    weights = mask.weights
    lum = luminance(source.pixels)
    core = weights > 0.5
    if np.any(core):
        w = weights[core].astype(np.float64)
        mean_lum = float((w * lum[core].astype(np.float64)).sum() / w.sum())
    else:
        mean_lum = 0.0
    if mean_lum < MIN_MEAN_LUMINANCE:
        shading = np.ones_like(lum)
    else:
        shading = np.clip(lum / np.float32(mean_lum), 0.0, SHADING_CLAMP)
    color = np.array(
        [params.color_r, params.color_g, params.color_b], dtype=np.float32
    ) / np.float32(255.0)
    shaded_color = np.clip(color[None, None, :] * shading[..., None], 0.0, 1.0)
    blend = (alpha * weights)[..., None]
    out = (1.0 - blend) * source.pixels + blend * shaded_color
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def gloss_pass(
    base: ImageBuffer,
    highlight: HighlightMap,
    mask: ApplicationMask,
    params: GraphicsParams,
) -> ImageBuffer:
    """Add a specular term: gloss_amount * highlight^k, k = 1 + (1-roughness)*32."""
    if params.gloss_amount == 0.0:
        return base.copy()
    k = np.float32(1.0 + (1.0 - params.gloss_roughness) * GLOSS_EXPONENT_SPAN)
    specular = np.float32(params.gloss_amount) * np.power(highlight.values, k)
    out = base.pixels + (mask.weights * specular)[..., None]
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def reflection_pass(
    base: ImageBuffer,
    highlight: HighlightMap,
    mask: ApplicationMask,
    params: GraphicsParams,
) -> ImageBuffer:
    """Add an environment-reflection bloom: the sigma=4 blurred highlight map."""
    if params.reflection_intensity == 0.0:
        return base.copy()
    bloom = gaussian_blur(highlight.values, REFLECTION_BLUR_SIGMA)
    out = base.pixels + (
        np.float32(params.reflection_intensity) * mask.weights * bloom
    )[..., None]
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def render(req: RenderRequest) -> ImageBuffer:
    """Full composite for one frame; deterministic and local to the mask."""
    return _render_timed(req, None)


def _render_timed(req: RenderRequest, timings: dict[str, float] | None) -> ImageBuffer:
    clock = time.perf_counter
    t0 = clock()
    mask = rasterize_mask(
        req.geometry.polygons_for(req.target),
        req.source.width,
        req.source.height,
        req.feather_sigma,
    )
    t1 = clock()
    highlight = estimate_highlight(req.source, mask)
    t2 = clock()
    out = recolor(req.source, mask, req.params, req.user_intensity)
    t3 = clock()
    out = gloss_pass(out, highlight, mask, req.params)
    t4 = clock()
    out = reflection_pass(out, highlight, mask, req.params)
    t5 = clock()
    if timings is not None:
        timings["mask"] = t1 - t0
        timings["highlight"] = t2 - t1
        timings["recolor"] = t3 - t2
        timings["gloss"] = t4 - t3
        timings["reflection"] = t5 - t4
        timings["total"] = t5 - t0
    return out


def composite_with_mask(
    source: ImageBuffer,
    mask: ApplicationMask,
    highlight: HighlightMap,
    params: GraphicsParams,
    user_intensity: float = 1.0,
) -> ImageBuffer:
    """Recolor + gloss + reflection with a precomputed mask and highlight map.

    Equivalent to :func:`render` for the same mask/highlight inputs; lets
    repeated renders of one scene (parameter search) skip the per-frame
    geometry work.
    """
    out = recolor(source, mask, params, user_intensity)
    out = gloss_pass(out, highlight, mask, params)
    return reflection_pass(out, highlight, mask, params)


def render_sequence(
    frames: Sequence[tuple[ImageBuffer, FaceGeometry]],
    params: GraphicsParams,
    target: Target = Target.LIPS,
    user_intensity: float = 1.0,
    feather_sigma: float = DEFAULT_FEATHER_SIGMA,
    threads: int | None = 1,
) -> list[ImageBuffer]:
    """Independent per-frame renders with shared parameters, order preserved."""
    if not frames:
        raise RenderError("frame sequence is empty")
    requests = []
    for index, (source, geometry) in enumerate(frames):
        try:
            requests.append(
                RenderRequest(source, geometry, params, target, user_intensity, feather_sigma)
            )
        except RenderError as exc:
            raise RenderError(f"frame {index}: {exc}") from exc
    if threads is not None and threads <= 1:
        return [render(req) for req in requests]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(render, requests))


@dataclass(frozen=True)
class StageStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float


@dataclass(frozen=True)
class ProfileReport:
    """Wall-clock statistics per render stage over the measured window."""

    width: int
    height: int
    warmup: int
    measured: int
    stages: dict[str, StageStats] = field(default_factory=dict)

    def as_dict(self) -> dict:
        doc = {
            "width": self.width,
            "height": self.height,
            "warmup": self.warmup,
            "measured": self.measured,
        }
        for name, stats in self.stages.items():
            doc[f"{name}_mean_ms"] = stats.mean_ms
            doc[f"{name}_p50_ms"] = stats.p50_ms
            doc[f"{name}_p95_ms"] = stats.p95_ms
        return doc

    def as_text(self) -> str:
        lines = [
            f"render profile  {self.width}x{self.height}  "
            f"warmup={self.warmup} measured={self.measured}",
            f"{'stage':<12}{'mean ms':>10}{'p50 ms':>10}{'p95 ms':>10}",
        ]
        for name in PROFILE_STAGES:
            stats = self.stages[name]
            lines.append(
                f"{name:<12}{stats.mean_ms:>10.3f}{stats.p50_ms:>10.3f}{stats.p95_ms:>10.3f}"
            )
        return "\n".join(lines) + "\n"


def profile(
    frames: Sequence[tuple[ImageBuffer, FaceGeometry]],
    params: GraphicsParams,
    target: Target = Target.LIPS,
    user_intensity: float = 1.0,
    feather_sigma: float = DEFAULT_FEATHER_SIGMA,
    warmup: int = 100,
    measured: int = 500,
) -> ProfileReport:
    """Time each render stage, skipping ``warmup`` frames then averaging
    ``measured`` frames.  Frames are reused cyclically when fewer are given.
    """
    if measured < 1:
        raise RenderError(f"measured frame count must be >= 1, got {measured}")
    if not frames:
        raise RenderError("frame sequence is empty")
    samples: dict[str, list[float]] = {name: [] for name in PROFILE_STAGES}
    total = warmup + measured
    for i in range(total):
        source, geometry = frames[i % len(frames)]
        req = RenderRequest(source, geometry, params, target, user_intensity, feather_sigma)
        timings: dict[str, float] = {}
        _render_timed(req, timings)
        if i >= warmup:
            for name in PROFILE_STAGES:
                samples[name].append(timings[name])
    stages = {}
    for name, values in samples.items():
        ms = np.array(values) * 1e3
        stages[name] = StageStats(
            mean_ms=float(ms.mean()),
            p50_ms=float(np.percentile(ms, 50)),
            p95_ms=float(np.percentile(ms, 95)),
        )
    source0, _ = frames[0]
    return ProfileReport(
        width=source0.width,
        height=source0.height,
        warmup=warmup,
        measured=measured,
        stages=stages,
    )
