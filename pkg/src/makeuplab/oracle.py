"""Derivative-free material recovery by direct search against the renderer.

Minimizes the mean absolute per-channel difference, inside the application
mask, between a re-render of the source and a target image, over the
normalized parameter cube [0, 1]^7.  Serves as the ground-truth recovery
mechanism for verifying identifiability and cross-checking the learned
regressor on synthetic instances.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import DEFAULT_FEATHER_SIGMA, FaceGeometry, Target, rasterize_mask
from .image import ImageBuffer
from .params import (
    COMPONENT_NAMES,
    N_COMPONENTS,
    GraphicsParams,
    NormalizedParams,
    denormalize,
    normalize,
)
from .renderer import composite_with_mask, estimate_highlight

# Objective changes below this are treated as "parameter has no effect".
IDENTIFIABILITY_EPSILON = 1e-9
IDENTIFIABILITY_PROBE_STEP = 0.05


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    method: str = "nelder_mead"  # "nelder_mead" | "coordinate_search"
    max_evaluations: int = 2000
    simplex_scale: float = 0.25
    tolerance: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in ("nelder_mead", "coordinate_search"):
            raise OracleError(f"unknown search method {self.method!r}")
        if self.max_evaluations < 1:
            raise OracleError("max_evaluations must be >= 1")
        if self.tolerance <= 0 or self.simplex_scale <= 0:
            raise OracleError("tolerance and simplex_scale must be > 0")


@dataclass(frozen=True)
class OracleResult:
    params: GraphicsParams
    residual: float
    evaluations: int
    converged: bool
    unidentifiable: tuple[str, ...]


def oracle_estimate(
    source: ImageBuffer,
    geometry: FaceGeometry,
    target_image: ImageBuffer,
    target: Target = Target.LIPS,
    config: SearchConfig = SearchConfig(),
    user_intensity: float = 1.0,
    feather_sigma: float = DEFAULT_FEATHER_SIGMA,
    start: NormalizedParams | None = None,
) -> OracleResult:
    """Search the parameter cube for the material that re-renders closest to
    ``target_image``.

    Deterministic per seed.  The identifiability probe after the search costs
    up to 14 extra renders that do not count against ``max_evaluations``.
    """
    if (
        target_image.width != source.width
        or target_image.height != source.height
        or geometry.image_width != source.width
        or geometry.image_height != source.height
    ):
        raise OracleError("source, geometry and target image dimensions must match")
    mask = rasterize_mask(
        geometry.polygons_for(target), source.width, source.height, feather_sigma
    )
    support = mask.weights > 0
    if not np.any(support):
        raise OracleError(f"geometry produces an empty {target.value} mask")
    highlight = estimate_highlight(source, mask)
    target_pixels = target_image.pixels[support]

    def objective(v: np.ndarray) -> float:
        candidate = denormalize(NormalizedParams(np.clip(v, 0.0, 1.0)))
        rendered = composite_with_mask(source, mask, highlight, candidate, user_intensity)
        return float(np.abs(rendered.pixels[support] - target_pixels).mean())

    x0 = (
        np.full(N_COMPONENTS, 0.5)
        if start is None
        else np.asarray(start.values, dtype=np.float64)
    )
    if config.method == "nelder_mead":
        best_x, best_f, evals, converged = _nelder_mead(objective, x0, config)
    else:
        best_x, best_f, evals, converged = _coordinate_search(objective, x0, config)

    unidentifiable = _probe_identifiability(objective, best_x, best_f)
    return OracleResult(
        params=denormalize(NormalizedParams(np.clip(best_x, 0.0, 1.0))),
        residual=best_f,
        evaluations=evals,
        converged=converged,
        unidentifiable=unidentifiable,
    )


def _probe_identifiability(
    objective: Callable[[np.ndarray], float], x: np.ndarray, fx: float
) -> tuple[str, ...]:
    """Components whose perturbation leaves the objective unchanged."""
    flagged = []
    for i in range(N_COMPONENTS):
        change = 0.0
        for step in (IDENTIFIABILITY_PROBE_STEP, -IDENTIFIABILITY_PROBE_STEP):
            probe = x.copy()
            probe[i] = np.clip(probe[i] + step, 0.0, 1.0)
            if probe[i] == x[i]:
                continue
            change = max(change, abs(objective(probe) - fx))
        if change < IDENTIFIABILITY_EPSILON:
            flagged.append(COMPONENT_NAMES[i])
    return tuple(flagged)


def _nelder_mead(
    f: Callable[[np.ndarray], float], x0: np.ndarray, config: SearchConfig
) -> tuple[np.ndarray, float, int, bool]:
    """Bounded Nelder-Mead with standard coefficients and seeded restarts.

    Candidates are clamped to the unit cube before evaluation.  Returns as
    soon as the best objective reaches the tolerance; restarts from a seeded
    random point when the simplex collapses with budget left.
    """
    alpha, gamma, rho, sigma = 1.0, 2.0, 0.5, 0.5
    rng = np.random.default_rng(config.seed)
    budget = config.max_evaluations
    evals = 0
    best_x = None
    best_f = np.inf

    def evaluate(x: np.ndarray) -> float:
        nonlocal evals, best_x, best_f
        x = np.clip(x, 0.0, 1.0)
        value = f(x)
        evals += 1
        if value < best_f:
            best_f = value
            best_x = x
        return value

    start = x0
    while evals < budget:
        fx0 = evaluate(start)
        if best_f <= config.tolerance:
            return best_x, best_f, evals, True

        simplex = [start]
        values = [fx0]
        for i in range(N_COMPONENTS):
            if evals >= budget:
                return best_x, best_f, evals, best_f <= config.tolerance
            vertex = start.copy()
            step = config.simplex_scale
            vertex[i] = vertex[i] - step if vertex[i] + step > 1.0 else vertex[i] + step
            simplex.append(np.clip(vertex, 0.0, 1.0))
            values.append(evaluate(simplex[-1]))

        while evals < budget:
            if best_f <= config.tolerance:
                return best_x, best_f, evals, True
            order = np.argsort(values, kind="stable")
            simplex = [simplex[i] for i in order]
            values = [values[i] for i in order]
            spread = max(
                np.max(np.abs(v - simplex[0])) for v in simplex[1:]
            )
            if spread < 1e-9 or abs(values[-1] - values[0]) < 1e-15:
                break  # collapsed; restart below

            centroid = np.mean(simplex[:-1], axis=0)
            reflected = np.clip(centroid + alpha * (centroid - simplex[-1]), 0.0, 1.0)
            f_reflected = evaluate(reflected)
            if values[0] <= f_reflected < values[-2]:
                simplex[-1], values[-1] = reflected, f_reflected
                continue
            if f_reflected < values[0]:
                if evals >= budget:
                    break
                expanded = np.clip(centroid + gamma * (reflected - centroid), 0.0, 1.0)
                f_expanded = evaluate(expanded)
                if f_expanded < f_reflected:
                    simplex[-1], values[-1] = expanded, f_expanded
                else:
                    simplex[-1], values[-1] = reflected, f_reflected
                continue
            if evals >= budget:
                break
            contracted = np.clip(centroid + rho * (simplex[-1] - centroid), 0.0, 1.0)
            f_contracted = evaluate(contracted)
            if f_contracted < values[-1]:
                simplex[-1], values[-1] = contracted, f_contracted
                continue
            for i in range(1, len(simplex)):  # shrink toward the best vertex
                if evals >= budget:
                    break
                simplex[i] = simplex[0] + sigma * (simplex[i] - simplex[0])
                values[i] = evaluate(simplex[i])

        start = rng.random(N_COMPONENTS)

    return best_x, best_f, evals, best_f <= config.tolerance


def _coordinate_search(
    f: Callable[[np.ndarray], float], x0: np.ndarray, config: SearchConfig
) -> tuple[np.ndarray, float, int, bool]:
    """Cyclic coordinate descent with a halving step schedule."""
    budget = config.max_evaluations
    evals = 0
    x = np.clip(x0, 0.0, 1.0)
    fx = f(x)
    evals += 1
    if fx <= config.tolerance:
        return x, fx, evals, True
    step = config.simplex_scale
    while evals < budget and step > 1e-6:
        improved = False
        for i in range(N_COMPONENTS):
            for direction in (1.0, -1.0):
                if evals >= budget:
                    return x, fx, evals, fx <= config.tolerance
                probe = x.copy()
                probe[i] = np.clip(probe[i] + direction * step, 0.0, 1.0)
                if probe[i] == x[i]:
                    continue
                f_probe = f(probe)
                evals += 1
                if f_probe < fx:
                    x, fx = probe, f_probe
                    improved = True
                    if fx <= config.tolerance:
                        return x, fx, evals, True
                    break
        if not improved:
            step *= 0.5
    return x, fx, evals, fx <= config.tolerance


def recovery_error(true_params: GraphicsParams, found: GraphicsParams) -> dict[str, float]:
    """Per-component absolute error (raw parameter units)."""
    return {
        "opacity": abs(true_params.opacity - found.opacity),
        "color_r": abs(true_params.color_r - found.color_r),
        "color_g": abs(true_params.color_g - found.color_g),
        "color_b": abs(true_params.color_b - found.color_b),
        "gloss_amount": abs(true_params.gloss_amount - found.gloss_amount),
        "gloss_roughness": abs(true_params.gloss_roughness - found.gloss_roughness),
        "reflection_intensity": abs(
            true_params.reflection_intensity - found.reflection_intensity
        ),
    }


def write_oracle_report(
    rows: Sequence[tuple[GraphicsParams, OracleResult]], path: str | Path
) -> None:
    """One CSV row per instance: true vector, recovered vector, diagnostics."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [f"true_{n}" for n in COMPONENT_NAMES]
            + [f"found_{n}" for n in COMPONENT_NAMES]
            + ["residual", "evaluations", "converged", "unidentifiable"]
        )
        for true_params, result in rows:
            t = normalize(true_params).values
            g = normalize(result.params).values
            writer.writerow(
                [f"{v:.6f}" for v in t]
                + [f"{v:.6f}" for v in g]
                + [
                    f"{result.residual:.8f}",
                    result.evaluations,
                    int(result.converged),
                    "|".join(result.unidentifiable),
                ]
            )
