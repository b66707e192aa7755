from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)


class InputValidationError(RuntimeError):
    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


@dataclass(frozen=True)
class LpdMatrix:
    """Pointwise leave-one-out log predictive densities, one column per candidate model (nats)."""

    values: np.ndarray
    obs_ids: tuple[str, ...] = ()
    model_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        object.__setattr__(self, "values", values)
        if not self.obs_ids:
            object.__setattr__(self, "obs_ids", tuple(str(i + 1) for i in range(values.shape[0])))
        if not self.model_names:
            object.__setattr__(self, "model_names", tuple(f"M{k + 1}" for k in range(values.shape[1])))

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def K(self) -> int:
        return int(self.values.shape[1])

    def rows(self, index: np.ndarray) -> "LpdMatrix":
        index = np.asarray(index)
        return LpdMatrix(
            values=self.values[index],
            obs_ids=tuple(self.obs_ids[i] for i in np.arange(self.n)[index]),
            model_names=self.model_names,
        )


@dataclass(frozen=True)
class FeatureSet:
    cell_index: np.ndarray | None = None
    features: np.ndarray | None = None
    group_of_feature: np.ndarray | None = None
    standardized: bool = False
    medians: np.ndarray | None = None
    scales: np.ndarray | None = None
    cell_labels: tuple[str, ...] = ()
    constant_columns: tuple[int, ...] = ()
    obs_ids: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        if self.cell_index is not None:
            return int(len(self.cell_index))
        if self.features is not None:
            return int(self.features.shape[0])
        return 0

    @property
    def n_cells(self) -> int:
        return len(self.cell_labels) if self.cell_index is not None else 0

    @property
    def n_features(self) -> int:
        return 0 if self.features is None else int(self.features.shape[1])

    def rows(self, index: np.ndarray) -> "FeatureSet":
        index = np.asarray(index)
        return replace(
            self,
            cell_index=None if self.cell_index is None else self.cell_index[index],
            features=None if self.features is None else self.features[index],
            obs_ids=tuple(self.obs_ids[i] for i in np.arange(len(self.obs_ids))[index]) if self.obs_ids else (),
        )


@dataclass(frozen=True)
class SimplexWeights:
    w: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=float)
        if np.any(w < -1e-12) or np.any(w > 1 + 1e-12):
            raise InputValidationError("weights must lie in [0, 1]")
        sums = w.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-10):
            raise InputValidationError("weight rows must sum to 1", {"max_error": float(np.max(np.abs(sums - 1.0)))})
        object.__setattr__(self, "w", np.clip(w, 0.0, 1.0))


@dataclass
class UnconstrainedParams:
    alpha: np.ndarray
    mu: np.ndarray
    log_sigma: np.ndarray
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "UnconstrainedParams":
        return UnconstrainedParams(
            alpha=self.alpha.copy(),
            mu=self.mu.copy(),
            log_sigma=self.log_sigma.copy(),
            extra={key: value.copy() for key, value in self.extra.items()},
        )


def softmax_weights(alpha: np.ndarray) -> np.ndarray:
    """Map K-1 unconstrained weights (last model pinned at zero) to the simplex.

    Accepts a single row or any stack of rows; the last axis has length K-1.
    """
    alpha = np.asarray(alpha, dtype=float)
    full = np.concatenate([alpha, np.zeros(alpha.shape[:-1] + (1,))], axis=-1)
    full = full - full.max(axis=-1, keepdims=True)
    expd = np.exp(full)
    return expd / expd.sum(axis=-1, keepdims=True)


def rectify_features(
    x: np.ndarray,
    *,
    medians: np.ndarray | None = None,
    standardize: bool = False,
    scales: np.ndarray | None = None,
) -> FeatureSet:
    """Positive and negative parts around the column median, two columns per input dimension."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[0] < 1:
        raise InputValidationError("rectify_features needs at least one row")
    if not np.all(np.isfinite(x)):
        raise InputValidationError("rectify_features needs finite inputs")
    med = np.median(x, axis=0) if medians is None else np.asarray(medians, dtype=float)
    if med.shape != (x.shape[1],):
        raise InputValidationError(
            "median vector does not match input dimension",
            {"medians": int(med.size), "dimensions": int(x.shape[1])},
        )

    centered = x - med
    feats = np.empty((x.shape[0], 2 * x.shape[1]))
    feats[:, 0::2] = np.maximum(centered, 0.0)
    feats[:, 1::2] = np.maximum(-centered, 0.0)

    constant = tuple(int(j) for j in np.flatnonzero(np.all(feats == 0.0, axis=0)))
    if constant:
        logger.warning("rectified feature columns are constant columns=%s", list(constant))

    col_scales = None
    if standardize:
        if scales is None:
            col_scales = feats.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(feats.shape[1])
            col_scales = np.where(col_scales > 0, col_scales, 1.0)
        else:
            col_scales = np.asarray(scales, dtype=float)
        feats = feats / col_scales

    return FeatureSet(
        features=feats,
        standardized=standardize,
        medians=med,
        scales=col_scales,
        constant_columns=constant,
    )


def relabel_cells(labels: np.ndarray) -> tuple[np.ndarray, tuple[str, ...]]:
    uniques, inverse = np.unique(np.asarray(labels), return_inverse=True)
    return inverse.astype(int).ravel(), tuple(str(u) for u in uniques)


def validate(
    lpd: LpdMatrix,
    feats: FeatureSet | None = None,
    *,
    min_models: int = 2,
    allow_empty: bool = False,
) -> tuple[LpdMatrix, FeatureSet | None]:
    values = lpd.values
    if values.ndim != 2:
        raise InputValidationError("log density matrix must be two-dimensional", {"ndim": int(values.ndim)})
    if lpd.K < min_models:
        raise InputValidationError(f"need at least {min_models} models, got {lpd.K}", {"K": lpd.K})
    if lpd.n < 1 and not allow_empty:
        raise InputValidationError("log density matrix has no observations", {"n": 0})
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        locations = [[int(i), int(k)] for i, k in bad[:20]]
        raise InputValidationError(
            f"non-finite log density at (i, k) = {tuple(locations[0])}",
            {"locations": locations, "count": int(len(bad))},
        )
    if len(lpd.obs_ids) != lpd.n:
        raise InputValidationError("obs_ids length does not match rows", {"obs_ids": len(lpd.obs_ids), "n": lpd.n})

    if feats is None:
        return lpd, None

    if feats.n != lpd.n:
        raise InputValidationError(
            f"dimension mismatch: log densities have n={lpd.n} rows, features have n={feats.n}",
            {"lpd_n": lpd.n, "features_n": feats.n},
        )
    if feats.obs_ids and tuple(feats.obs_ids) != tuple(lpd.obs_ids):
        raise InputValidationError("obs_id columns of log densities and features disagree")

    if feats.features is not None:
        f = np.asarray(feats.features, dtype=float)
        if f.ndim != 2:
            raise InputValidationError("feature matrix must be two-dimensional")
        bad = np.argwhere(~np.isfinite(f))
        if bad.size:
            raise InputValidationError(
                f"non-finite feature at (i, m) = {tuple(int(v) for v in bad[0])}",
                {"locations": [[int(i), int(m)] for i, m in bad[:20]]},
            )
        if feats.standardized:
            sd = f.std(axis=0, ddof=1) if f.shape[0] > 1 else np.ones(f.shape[1])
            off = [
                int(m) for m in range(f.shape[1])
                if m not in feats.constant_columns and abs(sd[m] - 1.0) > 1e-6
            ]
            if off:
                raise InputValidationError("standardized features without unit variance", {"columns": off})
        if feats.group_of_feature is not None and len(feats.group_of_feature) != f.shape[1]:
            raise InputValidationError(
                "group_of_feature length does not match feature columns",
                {"groups": len(feats.group_of_feature), "columns": int(f.shape[1])},
            )

    if feats.cell_index is not None:
        cells = np.asarray(feats.cell_index)
        if feats.cell_labels:
            n_cells = len(feats.cell_labels)
            if cells.min(initial=0) < 0 or cells.max(initial=-1) >= n_cells:
                raise InputValidationError("cell index outside the label range")
            counts = np.bincount(cells, minlength=n_cells)
            empty = [feats.cell_labels[j] for j in np.flatnonzero(counts == 0)]
            if empty:
                raise InputValidationError(f"empty cells: {empty}", {"cells": empty})
        else:
            codes, labels = relabel_cells(cells)
            feats = replace(feats, cell_index=codes, cell_labels=labels)

    return lpd, feats


def design_matrix(feats: FeatureSet | None, n: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Columns are one-hot cell dummies followed by continuous features.

    Returns the matrix, the group of every column and the number of cell columns.
    Cell dummies form group 0; continuous columns follow their own grouping, offset past it.
    """
    blocks: list[np.ndarray] = []
    groups: list[np.ndarray] = []
    n_cell_cols = 0
    if feats is not None and feats.cell_index is not None:
        n_cell_cols = feats.n_cells or int(np.max(feats.cell_index)) + 1
        onehot = np.zeros((n, n_cell_cols))
        onehot[np.arange(n), np.asarray(feats.cell_index, dtype=int)] = 1.0
        blocks.append(onehot)
        groups.append(np.zeros(n_cell_cols, dtype=int))
    if feats is not None and feats.features is not None and feats.n_features:
        blocks.append(np.asarray(feats.features, dtype=float))
        offset = 1 if n_cell_cols else 0
        if feats.group_of_feature is not None:
            codes, _ = relabel_cells(feats.group_of_feature)
            groups.append(codes + offset)
        else:
            groups.append(np.full(feats.n_features, offset, dtype=int))
    if not blocks:
        return np.zeros((n, 0)), np.zeros(0, dtype=int), 0
    return np.hstack(blocks), np.concatenate(groups), n_cell_cols


def mixture_log_likelihood(
    shifted: np.ndarray,
    eta: np.ndarray,
    row_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Weighted log score of softmax-weighted mixtures and its gradient in eta.

    `shifted` holds log densities minus their row maximum; eta is n x (K-1) with the last
    model pinned at zero. The gradient of log sum_k w_k p_k in eta_k is r_k - w_k, with r
    the posterior responsibility of model k.
    """
    weights = softmax_weights(eta)
    dens = np.exp(shifted)
    joint = weights * dens
    mix = joint.sum(axis=1)
    log_mix = np.log(mix)
    grad = joint / mix[:, None] - weights
    if row_weights is None:
        return float(log_mix.sum()), grad[:, :-1]
    return float(np.dot(row_weights, log_mix)), (row_weights[:, None] * grad)[:, :-1]
