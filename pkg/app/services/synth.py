from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from app.services.core import FeatureSet, InputValidationError, LpdMatrix, softmax_weights
from app.services.scenarios import (
    TOY_DG_HIGH,
    TOY_DG_LOW,
    Scenario,
    bernoulli_sqrt,
    bernoulli_sqrt_probs,
    spike_slab,
    spike_slab_densities,
)

logger = logging.getLogger(__name__)

# two-point construction: density HIGH under the designated model, LOW under the rest
HIGH = 1.0
LOW = 0.01
OUTLIER_SD = 1.0
NOISE_SD = 0.1


@dataclass
class SyntheticData:
    lpd: LpdMatrix | None = None
    feats: FeatureSet | None = None
    scenario: Scenario | None = None
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    truth: dict[str, Any] = field(default_factory=dict)


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def gen_spike_slab(delta: float, n: int, seed: int, *, right_upper: float = 2.0) -> SyntheticData:
    if not 0.0 <= delta <= 1.0:
        raise InputValidationError("delta must lie in [0, 1]", {"delta": delta})
    rng = _rng(seed)
    y = rng.uniform(TOY_DG_LOW, TOY_DG_HIGH, size=n)
    with np.errstate(divide="ignore"):
        values = np.log(spike_slab_densities(y, delta, right_upper))
    return SyntheticData(
        lpd=LpdMatrix(values=values),
        scenario=spike_slab(delta, right_upper=right_upper),
        y=y,
        truth={"delta": delta, "right_upper": right_upper},
    )


def gen_bernoulli_sqrt(n: int, seed: int) -> SyntheticData:
    rng = _rng(seed)
    x = rng.uniform(0.0, 1.0, size=n)
    y = (rng.uniform(size=n) < x).astype(int)
    probs = bernoulli_sqrt_probs(x)
    with np.errstate(divide="ignore"):
        values = np.where(y[:, None] == 1, np.log(probs), np.log1p(-probs))
    return SyntheticData(
        lpd=LpdMatrix(values=values),
        feats=FeatureSet(features=x.reshape(-1, 1)),
        scenario=bernoulli_sqrt(),
        x=x,
        y=y,
    )


def designated_model_probs(weights: np.ndarray) -> np.ndarray:
    """Designation probabilities whose population stacking optimum is exactly `weights`."""
    weights = np.asarray(weights, dtype=float)
    K = weights.shape[-1]
    c = LOW / (HIGH - LOW)
    return (weights + c) / (1.0 + K * c)


def _two_point_rows(weights: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    q = designated_model_probs(weights)
    cumulative = np.cumsum(q, axis=-1)
    u = rng.uniform(size=q.shape[0])
    z = np.minimum((u[:, None] > cumulative).sum(axis=1), q.shape[1] - 1)
    values = np.full(q.shape, math.log(LOW))
    values[np.arange(q.shape[0]), z] = math.log(HIGH)
    return values, z


def gen_cells(
    J: int,
    K: int,
    n_per_cell: int | list[int] | np.ndarray,
    effect_size: float,
    seed: int,
    *,
    true_weights: np.ndarray | None = None,
) -> SyntheticData:
    """Discrete-cell data whose per-cell population stacking optimum is known exactly."""
    if J < 1 or K < 2:
        raise InputValidationError("gen_cells needs J >= 1 and K >= 2", {"J": J, "K": K})
    counts = np.full(J, int(n_per_cell)) if np.isscalar(n_per_cell) else np.asarray(n_per_cell, dtype=int)
    if counts.shape != (J,) or np.any(counts < 1):
        raise InputValidationError("n_per_cell needs one positive count per cell", {"n_per_cell": counts.tolist()})
    rng = _rng(seed)
    if true_weights is None:
        eta = effect_size * rng.standard_normal((J, K - 1))
        weights = softmax_weights(eta)
    else:
        weights = np.asarray(true_weights, dtype=float)
        if weights.shape != (J, K) or np.any(weights < 0) or np.any(np.abs(weights.sum(axis=1) - 1) > 1e-10):
            raise InputValidationError("true_weights must be a J x K array of simplex rows")
        eta = None

    cells = np.repeat(np.arange(J), counts)
    values, z = _two_point_rows(weights[cells], rng)
    labels = tuple(f"c{j + 1}" for j in range(J))
    logger.info("generated cells J=%s K=%s n=%s effect_size=%s", J, K, int(counts.sum()), effect_size)
    return SyntheticData(
        lpd=LpdMatrix(values=values),
        feats=FeatureSet(cell_index=cells, cell_labels=labels),
        truth={
            "weights": weights,
            "eta": eta,
            "designation_probs": designated_model_probs(weights),
            "n_per_cell": counts.tolist(),
            "designated": z,
        },
    )


def gen_varying_weights(n: int, K: int, seed: int, slope: float = 1.5) -> SyntheticData:
    """Continuous input x ~ N(0, 1) with true weights softmax(slope * x * c_k, 0)."""
    if K < 2:
        raise InputValidationError("gen_varying_weights needs K >= 2")
    rng = _rng(seed)
    x = rng.standard_normal(n)
    direction = 1.0 - 2.0 * np.arange(K - 1) / max(K - 1, 1)
    weights = softmax_weights(slope * x[:, None] * direction[None, :])
    values, z = _two_point_rows(weights, rng)
    return SyntheticData(
        lpd=LpdMatrix(values=values),
        feats=FeatureSet(features=x.reshape(-1, 1)),
        x=x,
        truth={"weights": weights, "slope": slope, "designated": z},
    )


def f_true(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return 0.3 + 0.4 * x + 0.5 * np.sin(2.7 * x) + 1.1 / (1.0 + x**2)


def gen_neal_regression(n: int, seed: int, outlier_prob: float = 0.05) -> SyntheticData:
    """Regression with a smooth mean and a small share of high-variance outliers."""
    rng = _rng(seed)
    x = rng.standard_normal(n)
    outlier = rng.uniform(size=n) < outlier_prob
    sd = np.where(outlier, OUTLIER_SD, NOISE_SD)
    y = f_true(x) + sd * rng.standard_normal(n)
    return SyntheticData(
        x=x,
        y=y,
        truth={"outlier": outlier, "outlier_prob": outlier_prob},
    )
