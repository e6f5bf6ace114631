"""Image similarity metrics and transfer-quality evaluation protocols.

L1 is the mean absolute channel difference.  MS-SSIM is computed on Rec.601
luminance with the standard 5-scale weights, an 11x11 Gaussian window
(sigma 1.5, valid extent only), stabilizers K1=0.01 / K2=0.03 on unit data
range, and dyadic 2x2 mean-pool downsampling; images too small for 5 scales
use fewer scales with renormalized weights, and negative contrast terms
clamp to zero, so the result lies in [0, 1].
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import DatasetManifest, ManifestRecord
from .encoder import RegressorModel, estimate
from .encoder import forward as encoder_forward
from .geometry import FaceGeometry, Target, load_geometry
from .image import ImageBuffer, load_png
from .params import COMPONENT_NAMES, NormalizedParams, denormalize
from .renderer import RenderRequest, luminance, render

logger = logging.getLogger(__name__)

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_WINDOW = 11
MSSSIM_SIGMA = 1.5
MSSSIM_K1 = 0.01
MSSSIM_K2 = 0.03


class MetricError(ValueError):
    pass


def _check_same_size(a: ImageBuffer, b: ImageBuffer) -> None:
    if a.width != b.width or a.height != b.height:
        raise MetricError(
            f"image dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def l1(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean absolute difference over all pixels and channels."""
    _check_same_size(a, b)
    return float(
        np.abs(a.pixels.astype(np.float64) - b.pixels.astype(np.float64)).mean()
    )


def _ssim_window() -> np.ndarray:
    x = np.arange(MSSSIM_WINDOW, dtype=np.float64) - (MSSSIM_WINDOW - 1) / 2.0
    k = np.exp(-0.5 * (x / MSSSIM_SIGMA) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1-D kernel on both axes."""
    rows = np.lib.stride_tricks.sliding_window_view(img, len(kernel), axis=1) @ kernel
    return np.lib.stride_tricks.sliding_window_view(rows, len(kernel), axis=0).transpose(
        0, 2, 1
    ) @ kernel


def _ssim_components(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(mean luminance-comparison term incl. structure, mean contrast-structure)."""
    kernel = _ssim_window()
    c1 = MSSSIM_K1**2
    c2 = MSSSIM_K2**2
    mu_a = _filter_valid(a, kernel)
    mu_b = _filter_valid(b, kernel)
    var_a = _filter_valid(a * a, kernel) - mu_a * mu_a
    var_b = _filter_valid(b * b, kernel) - mu_b * mu_b
    cov = _filter_valid(a * b, kernel) - mu_a * mu_b
    cs_map = (2.0 * cov + c2) / (var_a + var_b + c2)
    ssim_map = ((2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)) * cs_map
    return float(ssim_map.mean()), float(cs_map.mean())


def _downsample2(img: np.ndarray) -> np.ndarray:
    h = (img.shape[0] // 2) * 2
    w = (img.shape[1] // 2) * 2
    cropped = img[:h, :w]
    return 0.25 * (
        cropped[0::2, 0::2] + cropped[0::2, 1::2] + cropped[1::2, 0::2] + cropped[1::2, 1::2]
    )


def msssim_scale_count(width: int, height: int) -> int:
    """Largest usable scale count (<= 5): the coarsest scale must still fit
    the 11x11 window."""
    scales = 0
    size = min(width, height)
    while scales < len(MSSSIM_WEIGHTS) and size >= MSSSIM_WINDOW:
        scales += 1
        size //= 2
    return scales


def ms_ssim(a: ImageBuffer, b: ImageBuffer) -> float:
    """Multi-scale structural similarity on luminance, in [0, 1]."""
    _check_same_size(a, b)
    scales = msssim_scale_count(a.width, a.height)
    if scales == 0:
        raise MetricError(
            f"images must be at least {MSSSIM_WINDOW}x{MSSSIM_WINDOW}, "
            f"got {a.width}x{a.height}"
        )
    weights = np.array(MSSSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    lum_a = luminance(a.pixels).astype(np.float64)
    lum_b = luminance(b.pixels).astype(np.float64)
    value = 1.0
    for level in range(scales):
        ssim_mean, cs_mean = _ssim_components(lum_a, lum_b)
        term = ssim_mean if level == scales - 1 else cs_mean
        value *= max(term, 0.0) ** weights[level]
        if level < scales - 1:
            lum_a = _downsample2(lum_a)
            lum_b = _downsample2(lum_b)
    return float(value)


@dataclass(frozen=True)
class TripletRecord:
    """Reference with makeup, bare source, and ground truth of the source
    wearing the reference makeup."""

    reference_image: ImageBuffer
    reference_geometry: FaceGeometry
    source_image: ImageBuffer
    source_geometry: FaceGeometry
    ground_truth: ImageBuffer

    def __post_init__(self) -> None:
        _check_same_size(self.source_image, self.ground_truth)


def load_triplets(path: str | Path) -> list[TripletRecord]:
    """Triplet list file: JSON array of per-record path documents, with paths
    relative to the list file."""
    path = Path(path)
    docs = json.loads(path.read_text())
    triplets = []
    for doc in docs:
        triplets.append(
            TripletRecord(
                reference_image=load_png(path.parent / doc["reference_image"]),
                reference_geometry=load_geometry(path.parent / doc["reference_geometry"]),
                source_image=load_png(path.parent / doc["source_image"]),
                source_geometry=load_geometry(path.parent / doc["source_geometry"]),
                ground_truth=load_png(path.parent / doc["ground_truth_image"]),
            )
        )
    return triplets


@dataclass(frozen=True)
class TripletInstance:
    index: int
    l1: float
    one_minus_msssim: float
    failed: bool = False


@dataclass(frozen=True)
class EvalReport:
    instances: tuple[TripletInstance, ...]
    mean_l1: float
    mean_one_minus_msssim: float
    evaluated: int
    failed: int


def evaluate_triplets(
    triplets: Sequence[TripletRecord],
    model: RegressorModel,
    target: Target = Target.LIPS,
    user_intensity: float = 1.0,
) -> EvalReport:
    """Estimate from each reference, render on its source, score vs ground truth."""
    if not triplets:
        raise MetricError("no triplets to evaluate")
    instances = []
    for index, triplet in enumerate(triplets):
        try:
            params = estimate(model, triplet.reference_image, triplet.reference_geometry, target)
            output = render(
                RenderRequest(
                    source=triplet.source_image,
                    geometry=triplet.source_geometry,
                    params=params,
                    target=target,
                    user_intensity=user_intensity,
                )
            )
            instances.append(
                TripletInstance(
                    index=index,
                    l1=l1(output, triplet.ground_truth),
                    one_minus_msssim=1.0 - ms_ssim(output, triplet.ground_truth),
                )
            )
        except (ValueError, RuntimeError) as exc:
            logger.warning("triplet %d failed: %s", index, exc)
            instances.append(TripletInstance(index=index, l1=np.nan, one_minus_msssim=np.nan, failed=True))
    ok = [inst for inst in instances if not inst.failed]
    if not ok:
        raise MetricError("every triplet failed to evaluate")
    return EvalReport(
        instances=tuple(instances),
        mean_l1=float(np.mean([inst.l1 for inst in ok])),
        mean_one_minus_msssim=float(np.mean([inst.one_minus_msssim for inst in ok])),
        evaluated=len(ok),
        failed=len(instances) - len(ok),
    )


def write_eval_report(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# metrics computed over full images\n")
        writer = csv.writer(fh)
        writer.writerow(["index", "l1", "one_minus_msssim", "failed"])
        for inst in report.instances:
            writer.writerow(
                [
                    inst.index,
                    "" if inst.failed else f"{inst.l1:.6f}",
                    "" if inst.failed else f"{inst.one_minus_msssim:.6f}",
                    int(inst.failed),
                ]
            )
        fh.write(
            f"# mean_l1={report.mean_l1:.6f} "
            f"mean_one_minus_msssim={report.mean_one_minus_msssim:.6f} "
            f"evaluated={report.evaluated} failed={report.failed}\n"
        )


@dataclass(frozen=True)
class RecoveryReport:
    per_component_mae: tuple[float, ...]
    mean_mae: float
    round_trip_l1: float
    count: int

    def as_dict(self) -> dict:
        doc = {
            f"mae_{name}": value
            for name, value in zip(COMPONENT_NAMES, self.per_component_mae)
        }
        doc["mean_mae"] = self.mean_mae
        doc["round_trip_l1"] = self.round_trip_l1
        doc["count"] = self.count
        return doc


def evaluate_recovery(
    manifest: DatasetManifest,
    model: RegressorModel | None,
    predictor: Callable[[ManifestRecord, ImageBuffer], NormalizedParams] | None = None,
    round_trip_limit: int | None = None,
) -> RecoveryReport:
    """Per-component MAE of predictions vs labels over a manifest, plus the
    mean full-image L1 between true-parameter and estimated-parameter renders.

    ``predictor`` overrides the model (used to benchmark reference points
    such as a perfect or constant predictor).
    """
    if manifest.count == 0:
        raise MetricError("empty manifest")
    if predictor is None:
        if model is None:
            raise MetricError("either a model or a predictor is required")
        predictor = lambda record, crop: encoder_forward(model, crop)

    errors = np.zeros((manifest.count, len(COMPONENT_NAMES)))
    predictions: list[NormalizedParams] = []
    for i, record in enumerate(manifest.records):
        crop = manifest.load_crop(record)
        predicted = predictor(record, crop)
        predictions.append(predicted)
        errors[i] = np.abs(predicted.values - np.array(record.label))

    limit = manifest.count if round_trip_limit is None else min(round_trip_limit, manifest.count)
    l1_values = []
    portrait_cache = {}
    for record, predicted in list(zip(manifest.records, predictions))[:limit]:
        if record.source_id not in portrait_cache:
            portrait_cache[record.source_id] = manifest.load_portrait(record.source_id)
        portrait = portrait_cache[record.source_id]
        common = dict(
            source=portrait.image,
            geometry=portrait.geometry,
            target=manifest.target,
            feather_sigma=manifest.feather_sigma,
        )
        true_render = render(RenderRequest(params=manifest.record_params(record), **common))
        est_render = render(RenderRequest(params=denormalize(predicted), **common))
        l1_values.append(l1(true_render, est_render))

    per_component = errors.mean(axis=0)
    return RecoveryReport(
        per_component_mae=tuple(float(v) for v in per_component),
        mean_mae=float(per_component.mean()),
        round_trip_l1=float(np.mean(l1_values)) if l1_values else 0.0,
        count=manifest.count,
    )


def write_recovery_report(report: RecoveryReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", "mae"])
        for name, value in zip(COMPONENT_NAMES, report.per_component_mae):
            writer.writerow([name, f"{value:.6f}"])
        fh.write(
            f"# mean_mae={report.mean_mae:.6f} round_trip_l1={report.round_trip_l1:.6f} "
            f"count={report.count}\n"
        )
