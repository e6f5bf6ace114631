"""Small separable image filters shared by masking, rendering and cropping.

Conventions are pinned here because tests compare against brute-force
references: Gaussian kernels are sampled (not integrated) with radius
ceil(3*sigma) and normalized to sum 1; values outside the frame are treated
as zero; bilinear resizing maps destination pixel centers through
src = (dst + 0.5) * scale - 0.5 with edge clamping.
"""

from __future__ import annotations

import math

import numpy as np


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D sampled Gaussian, radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(channel: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a single-channel raster, zero padding."""
    if sigma == 0:
        return channel.copy()
    kernel = gaussian_kernel(sigma).astype(channel.dtype)
    out = _convolve_axis(channel, kernel, axis=0)
    return _convolve_axis(out, kernel, axis=1)


def _convolve_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="constant")
    out = np.zeros_like(arr)
    for i, w in enumerate(kernel):
        if axis == 0:
            out += w * padded[i : i + arr.shape[0], :]
        else:
            out += w * padded[:, i : i + arr.shape[1]]
    return out


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W) or (H, W, C) array by bilinear sampling.

    Degenerates to an exact copy when the size is unchanged.
    """
    in_h, in_w = arr.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")

    def grid(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coords = (np.arange(n_out, dtype=np.float32) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        lo = np.floor(coords).astype(np.intp)
        frac = coords - lo
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, frac.astype(np.float32)

    y0, y1, fy = grid(out_h, in_h)
    x0, x1, fx = grid(out_w, in_w)

    if arr.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]

    top = arr[y0][:, x0] * (1.0 - fx) + arr[y0][:, x1] * fx
    bottom = arr[y1][:, x0] * (1.0 - fx) + arr[y1][:, x1] * fx
    return (top * (1.0 - fy) + bottom * fy).astype(arr.dtype, copy=False)
