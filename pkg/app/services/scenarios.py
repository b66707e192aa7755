from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from app.config import settings
from app.schemas import ScenarioSpec

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-6

# uniform(-3, 1) data on the spike-and-slab toy
TOY_DG_LOW = -3.0
TOY_DG_HIGH = 1.0
SPIKE_LOW = -4.0
SLAB_HIGH = 2.0


class ScenarioError(RuntimeError):
    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


@dataclass(frozen=True)
class Scenario:
    """A data-generating measure discretized on an (x, y) grid plus K conditional model densities.

    `mass[i, j]` is the probability of grid cell (x_i, y_j). `densities[k, i, j]` is the
    density of model k at y_j given x_i. Scenarios without a covariate use a single x node.
    """

    kind: str
    x_nodes: np.ndarray
    y_nodes: np.ndarray
    mass: np.ndarray
    densities: np.ndarray
    has_covariate: bool = False
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        mass = np.asarray(self.mass, dtype=float)
        dens = np.asarray(self.densities, dtype=float)
        if dens.ndim != 3 or dens.shape[1:] != mass.shape:
            raise ScenarioError(
                "model densities do not match the grid",
                {"densities": list(dens.shape), "mass": list(mass.shape)},
            )
        if np.any(mass < 0) or abs(float(mass.sum()) - 1.0) > MASS_TOLERANCE:
            raise ScenarioError("data-generating masses must be nonnegative and sum to 1", {"total": float(mass.sum())})
        if np.any(dens < 0) or not np.all(np.isfinite(dens)):
            raise ScenarioError("model densities must be finite and nonnegative")
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "densities", dens)

    @property
    def K(self) -> int:
        return int(self.densities.shape[0])

    def restricted(self, keep: list[int] | np.ndarray) -> "Scenario":
        keep = [int(k) for k in keep]
        if not keep:
            raise ScenarioError("a scenario needs at least one model")
        return Scenario(
            kind=self.kind,
            x_nodes=self.x_nodes,
            y_nodes=self.y_nodes,
            mass=self.mass,
            densities=self.densities[keep],
            has_covariate=self.has_covariate,
            params={**self.params, "models": keep},
        )


def spike_slab_densities(y: np.ndarray, delta: float, right_upper: float = 2.0) -> np.ndarray:
    """Densities (n, 2) of the two spike-and-slab models at the points y."""
    y = np.asarray(y, dtype=float)
    left = (y >= SPIKE_LOW) & (y <= 0.0)
    slab = (y > 0.0) & (y <= SLAB_HIGH)
    spike = (y > 0.0) & (y <= right_upper)
    left_width = -SPIKE_LOW
    p1 = (1.0 - delta) / left_width * left + delta / SLAB_HIGH * slab
    p2 = (1.0 - delta) / right_upper * spike + delta / left_width * left
    return np.column_stack([p1, p2])


def spike_slab(delta: float, cells: int | None = None, right_upper: float = 2.0) -> Scenario:
    if not 0.0 <= delta <= 1.0:
        raise ScenarioError("delta must lie in [0, 1]", {"delta": delta})
    if right_upper <= 0:
        raise ScenarioError("right_upper must be positive")
    cells = cells or settings.grid_cells
    edges = np.linspace(TOY_DG_LOW, TOY_DG_HIGH, cells + 1)
    y = 0.5 * (edges[:-1] + edges[1:])
    mass = np.full((1, cells), 1.0 / cells)
    dens = spike_slab_densities(y, delta, right_upper).T[:, None, :]
    return Scenario(
        kind="spike_slab",
        x_nodes=np.zeros(1),
        y_nodes=y,
        mass=mass,
        densities=dens,
        params={"delta": float(delta), "right_upper": float(right_upper), "cells": cells},
    )


def gauss_legendre_nodes(panels: int, order: int = 20, low: float = 0.0, high: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights on [low, high]."""
    base_x, base_w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(low, high, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * base_x[None, :]).ravel()
    weights = (half[:, None] * base_w[None, :]).ravel()
    return nodes, weights


def bernoulli_sqrt_probs(x: np.ndarray) -> np.ndarray:
    """Pr(y = 1 | x) under each model (n, 2): a fair coin and sqrt(x)."""
    x = np.asarray(x, dtype=float)
    return np.column_stack([np.full_like(x, 0.5), np.sqrt(x)])


def bernoulli_sqrt(nodes: int | None = None, order: int = 20) -> Scenario:
    nodes = nodes or settings.quadrature_nodes
    panels = max(1, nodes // order)
    x, wx = gauss_legendre_nodes(panels, order)
    p_true = x
    mass = np.column_stack([wx * (1.0 - p_true), wx * p_true])
    probs = bernoulli_sqrt_probs(x)
    dens = np.stack([np.column_stack([1.0 - probs[:, k], probs[:, k]]) for k in range(2)])
    return Scenario(
        kind="bernoulli_sqrt",
        x_nodes=x,
        y_nodes=np.array([0.0, 1.0]),
        mass=mass,
        densities=dens,
        has_covariate=True,
        params={"nodes": int(x.size), "order": order},
    )


def piecewise(
    y_edges: np.ndarray,
    dg_values: np.ndarray,
    model_values: np.ndarray,
    x_edges: np.ndarray | None = None,
) -> Scenario:
    """Piecewise-constant scenario; densities are exact per bin, so one node per bin suffices.

    `dg_values` is the joint density per (x bin, y bin) and `model_values[k]` the conditional
    model densities on the same bins.
    """
    y_edges = np.asarray(y_edges, dtype=float)
    dg = np.atleast_2d(np.asarray(dg_values, dtype=float))
    models = np.asarray(model_values, dtype=float)
    if models.ndim == 2:
        models = models[:, None, :]
    if y_edges.ndim != 1 or y_edges.size < 2 or np.any(np.diff(y_edges) <= 0):
        raise ScenarioError("y_edges must be strictly increasing")
    if x_edges is None:
        x_width = np.ones(1)
        x_nodes = np.zeros(1)
    else:
        x_edges = np.asarray(x_edges, dtype=float)
        if x_edges.ndim != 1 or x_edges.size < 2 or np.any(np.diff(x_edges) <= 0):
            raise ScenarioError("x_edges must be strictly increasing")
        x_width = np.diff(x_edges)
        x_nodes = 0.5 * (x_edges[:-1] + x_edges[1:])
    y_width = np.diff(y_edges)
    expected = (x_width.size, y_width.size)
    if dg.shape != expected or models.shape[1:] != expected:
        raise ScenarioError(
            "piecewise values do not match the bin edges",
            {"expected": list(expected), "dg": list(dg.shape), "models": list(models.shape)},
        )
    mass = dg * x_width[:, None] * y_width[None, :]
    return Scenario(
        kind="piecewise_custom",
        x_nodes=x_nodes,
        y_nodes=0.5 * (y_edges[:-1] + y_edges[1:]),
        mass=mass,
        densities=models,
        has_covariate=x_edges is not None,
        params={"x_bins": int(x_width.size), "y_bins": int(y_width.size)},
    )


def random_piecewise(
    K: int,
    rng: np.random.Generator,
    *,
    x_bins: int = 4,
    y_bins: int = 8,
    concentration: float = 1.0,
) -> Scenario:
    """Random piecewise scenario on [0, 1]^2 with strictly positive model densities."""
    x_edges = np.linspace(0.0, 1.0, x_bins + 1)
    y_edges = np.linspace(0.0, 1.0, y_bins + 1)
    cell_area = (1.0 / x_bins) * (1.0 / y_bins)
    dg = rng.dirichlet(np.full(x_bins * y_bins, concentration)).reshape(x_bins, y_bins) / cell_area
    models = rng.dirichlet(np.full(y_bins, concentration), size=(K, x_bins)) * y_bins
    models = np.maximum(models, 1e-6)
    return piecewise(y_edges, dg, models, x_edges=x_edges)


def from_spec(spec: ScenarioSpec) -> Scenario:
    if spec.kind == "spike_slab":
        return spike_slab(spec.delta, spec.grid_cells, spec.right_upper)
    if spec.kind == "bernoulli_sqrt":
        return bernoulli_sqrt(spec.quadrature_nodes)
    return piecewise(
        np.asarray(spec.y_edges),
        np.asarray(spec.dg_values),
        np.asarray(spec.model_values),
        x_edges=None if spec.x_edges is None else np.asarray(spec.x_edges),
    )
