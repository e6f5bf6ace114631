"""Makeup material parameter schema, normalization, fitting and sampling.

The material vector has 7 components in a fixed order that is part of the
wire/model contract everywhere in this package:

    [opacity, color_r, color_g, color_b, gloss_amount, gloss_roughness,
     reflection_intensity]

Normalization maps every component to [0, 1]: colors divide by 255 and the
(unbounded) gloss amount divides by ``GLOSS_CAP`` and clamps.  Training
labels, sampling and derivative-free search all live in this normalized unit
hypercube.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

# Gloss amounts above this cap normalize to 1.0.  The raw range is open-ended
# but a bounded regression target needs a finite scale; expert presets sit
# well below this value.
GLOSS_CAP = 2.0

# Ridge added to fitted covariances so they stay Cholesky-decomposable even
# for collinear preset lists.
COVARIANCE_RIDGE = 1e-6

# Default share of uniform draws in the sampling mixture.
DEFAULT_UNIFORM_WEIGHT = 0.5

COMPONENT_NAMES = (
    "opacity",
    "color_r",
    "color_g",
    "color_b",
    "gloss_amount",
    "gloss_roughness",
    "reflection_intensity",
)
N_COMPONENTS = 7


class ParamError(ValueError):
    """Invalid parameter value, vector or distribution."""


def _check_unit(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or not 0.0 <= value <= 1.0:
        raise ParamError(f"{name} must be in [0, 1], got {value!r}")
    return value


@dataclass(frozen=True)
class GraphicsParams:
    """One makeup material: what the renderer consumes and the encoder predicts.

    opacity, gloss_roughness and reflection_intensity are reals in [0, 1];
    color channels are integers in [0, 255]; gloss_amount is a real >= 0.
    """

    opacity: float
    color_r: int
    color_g: int
    color_b: int
    gloss_amount: float
    gloss_roughness: float
    reflection_intensity: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "opacity", _check_unit("opacity", self.opacity))
        for name in ("color_r", "color_g", "color_b"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ParamError(f"{name} must be an integer, got {value!r}")
            if not 0 <= int(value) <= 255:
                raise ParamError(f"{name} must be in [0, 255], got {value!r}")
            object.__setattr__(self, name, int(value))
        gloss = float(self.gloss_amount)
        if not np.isfinite(gloss) or gloss < 0.0:
            raise ParamError(f"gloss_amount must be >= 0, got {gloss!r}")
        object.__setattr__(self, "gloss_amount", gloss)
        object.__setattr__(
            self, "gloss_roughness", _check_unit("gloss_roughness", self.gloss_roughness)
        )
        object.__setattr__(
            self,
            "reflection_intensity",
            _check_unit("reflection_intensity", self.reflection_intensity),
        )

    @property
    def color(self) -> tuple[int, int, int]:
        return (self.color_r, self.color_g, self.color_b)

    def to_json_dict(self) -> dict:
        return {name: getattr(self, name) for name in COMPONENT_NAMES}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "GraphicsParams":
        missing = [name for name in COMPONENT_NAMES if name not in doc]
        if missing:
            raise ParamError(f"parameter document missing keys: {', '.join(missing)}")
        return cls(**{name: doc[name] for name in COMPONENT_NAMES})

    @classmethod
    def zero(cls) -> "GraphicsParams":
        return cls(0.0, 0, 0, 0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class NormalizedParams:
    """Material vector mapped to the unit hypercube, fixed component order."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (N_COMPONENTS,):
            raise ParamError(f"normalized vector must have shape (7,), got {values.shape}")
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise ParamError("normalized components must all lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __getitem__(self, index: int) -> float:
        return float(self.values[index])


def normalize(p: GraphicsParams) -> NormalizedParams:
    """Map a material to [0, 1]^7 (colors / 255, gloss / GLOSS_CAP clamped)."""
    gloss = min(p.gloss_amount / GLOSS_CAP, 1.0)
    return NormalizedParams(
        np.array(
            [
                p.opacity,
                p.color_r / 255.0,
                p.color_g / 255.0,
                p.color_b / 255.0,
                gloss,
                p.gloss_roughness,
                p.reflection_intensity,
            ]
        )
    )


def denormalize(v: NormalizedParams) -> GraphicsParams:
    """Inverse of :func:`normalize`; colors round to the nearest integer."""
    vals = v.values
    return GraphicsParams(
        opacity=float(vals[0]),
        color_r=int(round(vals[1] * 255.0)),
        color_g=int(round(vals[2] * 255.0)),
        color_b=int(round(vals[3] * 255.0)),
        gloss_amount=float(vals[4] * GLOSS_CAP),
        gloss_roughness=float(vals[5]),
        reflection_intensity=float(vals[6]),
    )


@dataclass(frozen=True)
class ParamDistribution:
    """Sampling mixture: uniform on the cube with weight ``uniform_weight``,
    otherwise a normal fitted to expert presets (in normalized space)."""

    mean: np.ndarray
    covariance: np.ndarray
    uniform_weight: float = DEFAULT_UNIFORM_WEIGHT

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if mean.shape != (N_COMPONENTS,):
            raise ParamError(f"mean must have shape (7,), got {mean.shape}")
        if cov.shape != (N_COMPONENTS, N_COMPONENTS):
            raise ParamError(f"covariance must have shape (7, 7), got {cov.shape}")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ParamError("distribution contains non-finite values")
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise ParamError("covariance must be symmetric within 1e-12")
        eigvals = np.linalg.eigvalsh(cov)
        if eigvals.min() < -1e-12:
            raise ParamError(f"covariance must be PSD, min eigenvalue {eigvals.min():g}")
        if not 0.0 <= float(self.uniform_weight) <= 1.0:
            raise ParamError(f"uniform_weight must be in [0, 1], got {self.uniform_weight!r}")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "uniform_weight", float(self.uniform_weight))

    def to_json_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "uniform_weight": self.uniform_weight,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ParamDistribution":
        try:
            return cls(
                mean=np.array(doc["mean"], dtype=np.float64),
                covariance=np.array(doc["covariance"], dtype=np.float64),
                uniform_weight=float(doc["uniform_weight"]),
            )
        except KeyError as exc:
            raise ParamError(f"distribution document missing key {exc}") from exc


def fit_expert_distribution(
    presets: Sequence[GraphicsParams],
    uniform_weight: float = DEFAULT_UNIFORM_WEIGHT,
) -> ParamDistribution:
    """Fit the normal component to a preset list (normalized space).

    Uses the sample mean and the n-1 sample covariance (zero matrix for a
    single preset), plus a small ridge so the result is always samplable.
    """
    if len(presets) == 0:
        raise ParamError("no presets")
    x = np.stack([normalize(p).values for p in presets])
    mean = x.mean(axis=0)
    if x.shape[0] >= 2:
        cov = np.cov(x, rowvar=False, ddof=1)
    else:
        cov = np.zeros((N_COMPONENTS, N_COMPONENTS))
    cov = cov + COVARIANCE_RIDGE * np.eye(N_COMPONENTS)
    # Force exact symmetry; np.cov can leave ~1e-17 asymmetry.
    cov = 0.5 * (cov + cov.T)
    return ParamDistribution(mean=mean, covariance=cov, uniform_weight=uniform_weight)


def sample_params(
    dist: ParamDistribution,
    n: int,
    seed: int | np.random.SeedSequence = 0,
) -> list[GraphicsParams]:
    """Draw ``n`` materials from the mixture, deterministic per seed.

    Normal draws are clamped componentwise to [0, 1] (keeps the sample count
    exact), then denormalized.
    """
    if n < 1:
        raise ParamError(f"sample count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    take_uniform = rng.random(n) < dist.uniform_weight
    uniform = rng.random((n, N_COMPONENTS))
    chol = np.linalg.cholesky(dist.covariance + 1e-15 * np.eye(N_COMPONENTS))
    normal = dist.mean + rng.standard_normal((n, N_COMPONENTS)) @ chol.T
    vectors = np.where(take_uniform[:, None], uniform, np.clip(normal, 0.0, 1.0))
    return [denormalize(NormalizedParams(v)) for v in vectors]


def load_params(path: str | Path) -> GraphicsParams:
    return GraphicsParams.from_json_dict(json.loads(Path(path).read_text()))


def save_params(p: GraphicsParams, path: str | Path) -> None:
    Path(path).write_text(params_to_json(p))


def params_to_json(p: GraphicsParams) -> str:
    return json.dumps(p.to_json_dict(), indent=2) + "\n"


def load_presets(path: str | Path) -> list[GraphicsParams]:
    docs = json.loads(Path(path).read_text())
    if not isinstance(docs, list):
        raise ParamError("preset file must contain an array of parameter documents")
    return [GraphicsParams.from_json_dict(doc) for doc in docs]


def save_presets(presets: Sequence[GraphicsParams], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps([p.to_json_dict() for p in presets], indent=2) + "\n"
    )


def load_distribution(path: str | Path) -> ParamDistribution:
    return ParamDistribution.from_json_dict(json.loads(Path(path).read_text()))


def save_distribution(dist: ParamDistribution, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dist.to_json_dict(), indent=2) + "\n")


# Lipstick materials in the spirit of product presets: opaque-to-sheer reds,
# pinks and berries with varying gloss.  Used to fit the default sampling
# distribution when the user supplies none.
BUNDLED_PRESETS: tuple[GraphicsParams, ...] = (
    GraphicsParams(0.85, 196, 32, 48, 0.60, 0.35, 0.40),
    GraphicsParams(0.90, 172, 24, 36, 0.30, 0.50, 0.30),
    GraphicsParams(0.75, 214, 64, 78, 0.90, 0.25, 0.55),
    GraphicsParams(0.80, 158, 20, 64, 0.45, 0.40, 0.35),
    GraphicsParams(0.95, 120, 16, 28, 0.20, 0.60, 0.25),
    GraphicsParams(0.70, 226, 98, 110, 1.10, 0.20, 0.60),
    GraphicsParams(0.88, 188, 44, 92, 0.55, 0.45, 0.45),
    GraphicsParams(0.65, 234, 120, 130, 1.30, 0.15, 0.70),
    GraphicsParams(0.92, 142, 28, 52, 0.35, 0.55, 0.30),
    GraphicsParams(0.78, 204, 52, 60, 0.75, 0.30, 0.50),
    GraphicsParams(0.83, 176, 36, 70, 0.50, 0.42, 0.38),
    GraphicsParams(0.72, 220, 84, 96, 1.00, 0.22, 0.58),
)
