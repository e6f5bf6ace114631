"""Synthetic supervised dataset: sampled materials rendered onto portraits.

Each record pairs a cropped rendered makeup region (stored as PNG) with the
normalized parameter vector used to render it.  The manifest JSON carries the
sampling distribution, the portrait corpus (materialized next to the crops)
and one row per record, so any crop can be re-rendered bit-identically from
the manifest alone.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (
    DEFAULT_CROP_EXPANSION,
    DEFAULT_CROP_SIZE,
    DEFAULT_FEATHER_SIGMA,
    Target,
    crop_region,
)
from .image import ImageBuffer, load_png, save_png
from .params import (
    GraphicsParams,
    NormalizedParams,
    ParamDistribution,
    denormalize,
    normalize,
    sample_params,
)
from .portraits import Portrait, save_portrait
from .renderer import RenderRequest, render

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    """In-memory training unit: rendered crop plus its normalized label."""

    crop: ImageBuffer
    label: NormalizedParams
    source_id: str
    target: Target


@dataclass(frozen=True)
class ManifestRecord:
    image: str  # crop path relative to the manifest root
    label: tuple[float, ...]
    source_id: str


@dataclass(frozen=True)
class PortraitRef:
    id: str
    image: str
    geometry: str


@dataclass
class DatasetManifest:
    crop_size: int
    target: Target
    count: int
    seed: int
    distribution: ParamDistribution
    records: list[ManifestRecord]
    portraits: list[PortraitRef]
    expansion: float = DEFAULT_CROP_EXPANSION
    feather_sigma: float = DEFAULT_FEATHER_SIGMA
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.count != len(self.records):
            raise DatasetError(
                f"count {self.count} does not match {len(self.records)} records"
            )

    def to_json_dict(self) -> dict:
        return {
            "crop_size": self.crop_size,
            "target": self.target.value,
            "count": self.count,
            "seed": self.seed,
            "expansion": self.expansion,
            "feather_sigma": self.feather_sigma,
            "distribution": self.distribution.to_json_dict(),
            "portraits": [
                {"id": p.id, "image": p.image, "geometry": p.geometry}
                for p in self.portraits
            ],
            "records": [
                {"image": r.image, "label": list(r.label), "source_id": r.source_id}
                for r in self.records
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict, root: Path | None = None) -> "DatasetManifest":
        return cls(
            crop_size=int(doc["crop_size"]),
            target=Target(doc["target"]),
            count=int(doc["count"]),
            seed=int(doc["seed"]),
            expansion=float(doc.get("expansion", DEFAULT_CROP_EXPANSION)),
            feather_sigma=float(doc.get("feather_sigma", DEFAULT_FEATHER_SIGMA)),
            distribution=ParamDistribution.from_json_dict(doc["distribution"]),
            portraits=[
                PortraitRef(p["id"], p["image"], p["geometry"])
                for p in doc["portraits"]
            ],
            records=[
                ManifestRecord(r["image"], tuple(r["label"]), r["source_id"])
                for r in doc["records"]
            ],
            root=root,
        )

    def record_label(self, record: ManifestRecord) -> NormalizedParams:
        return NormalizedParams(np.array(record.label))

    def record_params(self, record: ManifestRecord) -> GraphicsParams:
        return denormalize(self.record_label(record))

    def resolve(self, relpath: str) -> Path:
        if self.root is None:
            raise DatasetError("manifest has no root directory; load it from disk")
        return self.root / relpath

    def load_crop(self, record: ManifestRecord) -> ImageBuffer:
        return load_png(self.resolve(record.image))

    def load_portrait(self, source_id: str) -> Portrait:
        from .geometry import load_geometry

        for ref in self.portraits:
            if ref.id == source_id:
                return Portrait(
                    id=ref.id,
                    image=load_png(self.resolve(ref.image)),
                    geometry=load_geometry(self.resolve(ref.geometry)),
                )
        raise DatasetError(f"unknown portrait id {source_id!r}")


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json_dict(), indent=1) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    manifest = DatasetManifest.from_json_dict(json.loads(path.read_text()), root=path.parent)
    _validate_crops(manifest)
    return manifest


def _validate_crops(manifest: DatasetManifest) -> None:
    """Every referenced crop must exist and carry the declared size."""
    for record in manifest.records:
        crop_path = manifest.resolve(record.image)
        if not crop_path.exists():
            raise DatasetError(f"missing crop image {crop_path}")
        with Image.open(crop_path) as im:
            if im.size != (manifest.crop_size, manifest.crop_size):
                raise DatasetError(
                    f"crop {crop_path} is {im.size}, expected "
                    f"({manifest.crop_size}, {manifest.crop_size})"
                )


def _render_crop(
    portrait: Portrait,
    params: GraphicsParams,
    target: Target,
    crop_size: int,
    expansion: float,
    feather_sigma: float,
) -> ImageBuffer:
    rendered = render(
        RenderRequest(
            source=portrait.image,
            geometry=portrait.geometry,
            params=params,
            target=target,
            feather_sigma=feather_sigma,
        )
    )
    return crop_region(
        rendered, portrait.geometry.polygons_for(target), expansion, crop_size
    )


def generate_dataset(
    out_dir: str | Path,
    portraits: list[Portrait],
    dist: ParamDistribution,
    n: int,
    target: Target = Target.LIPS,
    crop_size: int = DEFAULT_CROP_SIZE,
    seed: int = 0,
    expansion: float = DEFAULT_CROP_EXPANSION,
    feather_sigma: float = DEFAULT_FEATHER_SIGMA,
    threads: int | None = 1,
) -> DatasetManifest:
    """Render ``n`` sampled materials onto seeded-random portraits and crop.

    Fully deterministic given the seed.  Portraits without polygons for the
    target are skipped with a warning; materialized portraits and crops are
    written under ``out_dir`` along with ``manifest.json``.
    """
    if n < 1:
        raise DatasetError(f"dataset size must be >= 1, got {n}")
    usable = []
    for portrait in portraits:
        if portrait.geometry.polygons_for(target):
            usable.append(portrait)
        else:
            logger.warning("portrait %s has no %s polygons, skipped", portrait.id, target.value)
    if not usable:
        raise DatasetError(f"no portraits with {target.value} polygons")

    out_dir = Path(out_dir)
    crops_dir = out_dir / "crops"
    crops_dir.mkdir(parents=True, exist_ok=True)
    portrait_refs = []
    for portrait in usable:
        image_path, geom_path = save_portrait(portrait, out_dir / "portraits")
        portrait_refs.append(
            PortraitRef(
                id=portrait.id,
                image=str(image_path.relative_to(out_dir)),
                geometry=str(geom_path.relative_to(out_dir)),
            )
        )

    sampled = sample_params(dist, n, seed)
    picks = np.random.default_rng(np.random.SeedSequence([seed, 1])).integers(
        0, len(usable), size=n
    )

    def make(i: int) -> ImageBuffer:
        return _render_crop(
            usable[picks[i]], sampled[i], target, crop_size, expansion, feather_sigma
        )

    if threads is not None and threads <= 1:
        crops = [make(i) for i in range(n)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            crops = list(pool.map(make, range(n)))

    records = []
    for i, crop in enumerate(crops):
        rel = f"crops/{i:06d}.png"
        save_png(crop, out_dir / rel)
        records.append(
            ManifestRecord(
                image=rel,
                label=tuple(float(x) for x in normalize(sampled[i]).values),
                source_id=usable[picks[i]].id,
            )
        )

    manifest = DatasetManifest(
        crop_size=crop_size,
        target=target,
        count=n,
        seed=seed,
        distribution=dist,
        records=records,
        portraits=portrait_refs,
        expansion=expansion,
        feather_sigma=feather_sigma,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def split_dataset(
    manifest: DatasetManifest, train_fraction: float, seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded shuffle then split into disjoint, exhaustive halves."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(manifest.count)
    k = int(manifest.count * train_fraction)
    parts = []
    for indices in (order[:k], order[k:]):
        records = [manifest.records[i] for i in indices]
        parts.append(
            DatasetManifest(
                crop_size=manifest.crop_size,
                target=manifest.target,
                count=len(records),
                seed=manifest.seed,
                distribution=manifest.distribution,
                records=records,
                portraits=manifest.portraits,
                expansion=manifest.expansion,
                feather_sigma=manifest.feather_sigma,
                root=manifest.root,
            )
        )
    return parts[0], parts[1]


def load_dataset_arrays(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Decode all crops to (N, 3, S, S) float32 plus (N, 7) float64 labels."""
    n = manifest.count
    s = manifest.crop_size
    x = np.empty((n, 3, s, s), dtype=np.float32)
    y = np.empty((n, 7), dtype=np.float64)
    for i, record in enumerate(manifest.records):
        crop = manifest.load_crop(record)
        x[i] = crop.pixels.transpose(2, 0, 1)
        y[i] = record.label
    return x, y


def verify_manifest(manifest: DatasetManifest, sample: int = 10, seed: int = 0) -> None:
    """Spot-check that stored crops re-render bit-identically from their row."""
    rng = np.random.default_rng(seed)
    count = min(sample, manifest.count)
    indices = rng.choice(manifest.count, size=count, replace=False)
    for i in indices:
        record = manifest.records[i]
        portrait = manifest.load_portrait(record.source_id)
        crop = _render_crop(
            portrait,
            manifest.record_params(record),
            manifest.target,
            manifest.crop_size,
            manifest.expansion,
            manifest.feather_sigma,
        )
        stored = manifest.load_crop(record)
        if not np.array_equal(crop.to_uint8(), stored.to_uint8()):
            raise DatasetError(
                f"record {i} ({record.image}) does not re-render bit-identically"
            )
