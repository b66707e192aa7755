from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.optimize import minimize

from app.config import settings
from app.schemas import FitOptions, WeightReport
from app.services.core import (
    FeatureSet,
    InputValidationError,
    LpdMatrix,
    design_matrix,
    mixture_log_likelihood,
    softmax_weights,
    validate,
)

logger = logging.getLogger(__name__)


@dataclass
class StackingFit:
    method: str
    weights: np.ndarray
    objective: float
    iters: int
    converged: bool
    trace: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def to_report(self) -> WeightReport:
        return WeightReport(
            method=self.method,  # type: ignore[arg-type]
            weights=self.weights.tolist(),
            objective=float(self.objective),
            iters=int(self.iters),
            converged=bool(self.converged),
            meta=self.meta,
        )


@dataclass
class AdditiveFit(StackingFit):
    alpha: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    capped: bool = False


def em_simplex(
    dens: np.ndarray,
    row_weights: np.ndarray | None = None,
    *,
    max_iters: int,
    tol: float,
    keep_trace: bool = False,
) -> tuple[np.ndarray, float, int, bool, np.ndarray | None]:
    """Multiplicative EM on the simplex for sum_i r_i log sum_k w_k dens_ik.

    Starts from uniform weights. Rows with zero weight are ignored; a row with positive
    weight whose densities are all zero makes the objective undefined.
    """
    dens = np.asarray(dens, dtype=float)
    n, K = dens.shape
    r = np.ones(n) if row_weights is None else np.asarray(row_weights, dtype=float)
    keep = r > 0
    dens, r = dens[keep], r[keep]
    total = float(r.sum())
    if total <= 0:
        raise InputValidationError("row weights sum to zero")

    dead = np.flatnonzero(~(dens.max(axis=1) > 0))
    if dead.size:
        rows = np.flatnonzero(keep)[dead]
        raise InputValidationError(
            "every model has zero density at some observation; the mixture log score is undefined",
            {"rows": [int(i) for i in rows[:20]]},
        )

    w = np.full(K, 1.0 / K)
    mix = dens @ w
    objective = float(np.dot(r, np.log(mix)))
    trace = [objective] if keep_trace else None
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        w = w * ((r / mix) @ dens) / total
        w = w / w.sum()
        mix = dens @ w
        updated = float(np.dot(r, np.log(mix)))
        change = abs(updated - objective)
        objective = updated
        if trace is not None:
            trace.append(objective)
        if change <= tol * max(1.0, abs(objective)):
            converged = True
            break
    if not converged:
        logger.warning("em did not converge iters=%s objective=%.6g", iters, objective)
    return w, objective, iters, converged, None if trace is None else np.asarray(trace)


def _row_weights(row_weights: np.ndarray | None, n: int) -> np.ndarray | None:
    if row_weights is None:
        return None
    r = np.asarray(row_weights, dtype=float)
    if r.shape != (n,):
        raise InputValidationError("row weights must have one entry per observation", {"expected": n, "got": list(r.shape)})
    if not np.all(np.isfinite(r)) or np.any(r < 0):
        raise InputValidationError("row weights must be finite and nonnegative")
    return r


def fit_complete_pooling(
    lpd: LpdMatrix,
    opts: FitOptions | None = None,
    *,
    row_weights: np.ndarray | None = None,
    keep_trace: bool = False,
) -> StackingFit:
    """One weight vector for all inputs. `row_weights` reweights observations (covariate shift)."""
    opts = opts or FitOptions()
    lpd, _ = validate(lpd)
    r = _row_weights(row_weights, lpd.n)
    offsets = lpd.values.max(axis=1)
    dens = np.exp(lpd.values - offsets[:, None])
    w, objective, iters, converged, trace = em_simplex(
        dens, r, max_iters=opts.max_iters, tol=opts.tol, keep_trace=keep_trace
    )
    shift = float(offsets.sum() if r is None else np.dot(r, offsets))
    if trace is not None:
        trace = trace + shift
    logger.info("complete pooling finished iters=%s converged=%s", iters, converged)
    return StackingFit(
        method="complete",
        weights=w,
        objective=objective + shift,
        iters=iters,
        converged=converged,
        trace=trace,
        meta={"engine": "em", "status": "converged" if converged else "max_iters"},
    )


def fit_no_pooling(
    lpd: LpdMatrix,
    feats: FeatureSet,
    opts: FitOptions | None = None,
    *,
    threads: int | None = None,
) -> StackingFit:
    """Complete pooling solved separately inside every cell; rows follow the cell labels."""
    opts = opts or FitOptions()
    if feats is None or feats.cell_index is None:
        raise InputValidationError("no-pooling stacking needs a cell index")
    lpd, feats = validate(lpd, feats)
    assert feats is not None
    cells = np.asarray(feats.cell_index)
    n_cells = len(feats.cell_labels)

    def _solve(j: int) -> StackingFit:
        return fit_complete_pooling(lpd.rows(np.flatnonzero(cells == j)), opts)

    workers = max(1, threads or settings.threads)
    if workers > 1 and n_cells > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(_solve, range(n_cells)))
    else:
        fits = [_solve(j) for j in range(n_cells)]

    converged = all(f.converged for f in fits)
    return StackingFit(
        method="nopool",
        weights=np.vstack([f.weights for f in fits]),
        objective=float(sum(f.objective for f in fits)),
        iters=max(f.iters for f in fits),
        converged=converged,
        meta={
            "engine": "em",
            "cell_labels": list(feats.cell_labels),
            "cell_iters": [f.iters for f in fits],
            "status": "converged" if converged else "max_iters",
        },
    )


def fit_additive_mle(
    lpd: LpdMatrix,
    feats: FeatureSet,
    opts: FitOptions | None = None,
    *,
    seed: int = 0,
) -> AdditiveFit:
    """Unpenalized maximum likelihood for weights softmax(mu + f(x) alpha), coefficients boxed."""
    opts = opts or FitOptions()
    lpd, feats = validate(lpd, feats)
    X, _, _ = design_matrix(feats, lpd.n)
    n, M = X.shape
    Km1 = lpd.K - 1
    shifted = lpd.values - lpd.values.max(axis=1, keepdims=True)
    offset = float(lpd.values.max(axis=1).sum())
    bound = opts.coef_bound

    def _unpack(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return theta[:Km1], theta[Km1:].reshape(M, Km1)

    def _negative(theta: np.ndarray) -> tuple[float, np.ndarray]:
        mu, alpha = _unpack(theta)
        value, grad_eta = mixture_log_likelihood(shifted, mu + X @ alpha)
        grad = np.concatenate([grad_eta.sum(axis=0), (X.T @ grad_eta).ravel()])
        return -value, -grad

    pooled = fit_complete_pooling(lpd, opts)
    start_mu = np.clip(np.log(np.maximum(pooled.weights[:-1], 1e-300)) - np.log(max(pooled.weights[-1], 1e-300)), -bound, bound)
    starts = [np.concatenate([start_mu, np.zeros(M * Km1)])]
    rng = np.random.default_rng(seed)
    for _ in range(opts.restarts):
        starts.append(rng.uniform(-2.0, 2.0, size=Km1 * (M + 1)))

    best = None
    for start in starts:
        result = minimize(
            _negative,
            start,
            jac=True,
            method="L-BFGS-B",
            bounds=[(-bound, bound)] * start.size,
            options={"maxiter": opts.max_iters, "ftol": 1e-15, "gtol": 1e-9},
        )
        if best is None or result.fun < best.fun:
            best = result
    assert best is not None

    mu, alpha = _unpack(best.x)
    capped = bool(np.any(np.abs(best.x) >= bound - 1e-6))
    if capped:
        logger.warning("additive stacking coefficients reached the bound=%s", bound)
    if not best.success:
        logger.warning("additive stacking did not converge: %s", best.message)
    weights = softmax_weights(mu + X @ alpha)
    return AdditiveFit(
        method="additive",
        weights=weights,
        objective=float(-best.fun) + offset,
        iters=int(best.nit),
        converged=bool(best.success),
        meta={
            "engine": "scipy_lbfgsb",
            "status": str(best.message),
            "capped": capped,
            "coef_bound": bound,
        },
        alpha=alpha,
        mu=mu,
        capped=capped,
    )
