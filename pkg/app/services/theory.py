from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import xlogy

from app.schemas import BoundCheck, TheoremReportOut
from app.services.core import InputValidationError
from app.services.optimize import em_simplex
from app.services.scenarios import Scenario, ScenarioError, spike_slab

logger = logging.getLogger(__name__)

__all__ = [
    "ScenarioError",
    "Partition",
    "TheoremReport",
    "elpd_of_weights",
    "model_elpds",
    "winner_partition",
    "separation_profile",
    "max_separation",
    "population_stacking",
    "theorem_bounds",
    "pointwise_selection_elpd",
    "pseudo_bma_weight",
    "is_identifiable",
    "delta_curve",
]

MARGIN_SLACK = 1e-12
BOUND_SLACK = 1e-9
KKT_SLACK = 1e-6
ZERO_WEIGHT = 1e-6
POPULATION_TOL = 1e-14

WeightInput = np.ndarray | Callable[[np.ndarray], np.ndarray]


@dataclass
class Partition:
    """Winner regions of a scenario under the joint (x, y) and the input-only (x) rules."""

    winner: np.ndarray
    margin: np.ndarray
    J_masses: np.ndarray
    celpd: np.ndarray
    input_winner: np.ndarray
    input_margin: np.ndarray
    I_masses: np.ndarray
    intervals: dict[int, list[tuple[float, float]]] = field(default_factory=dict)

    @property
    def rho(self) -> float:
        return float(self.J_masses.max())

    @property
    def rho_x(self) -> float:
        return float(self.I_masses.max())


@dataclass
class TheoremReport:
    L: float
    epsilon: float
    epsilon_input: float
    rho: float
    rho_x: float
    w_stacking: np.ndarray
    w_approx: np.ndarray
    identifiable: bool
    dropped_models: list[int]
    checks: list[BoundCheck]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> BoundCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_out(self) -> TheoremReportOut:
        return TheoremReportOut(
            L=self.L,
            epsilon=self.epsilon,
            rho=self.rho,
            rho_x=self.rho_x,
            w_stacking=self.w_stacking.tolist(),
            w_approx=self.w_approx.tolist(),
            identifiable=self.identifiable,
            dropped_models=self.dropped_models,
            checks=self.checks,
            all_passed=self.all_passed,
        )


def _weights_on_grid(sc: Scenario, w: WeightInput) -> np.ndarray:
    """Weights broadcast to (n_x, K)."""
    n_x = sc.x_nodes.size
    values = w(sc.x_nodes) if callable(w) else w
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = np.broadcast_to(values, (n_x, values.size))
    if values.shape != (n_x, sc.K):
        raise InputValidationError(
            "weights do not match the scenario",
            {"expected": [n_x, sc.K], "got": list(values.shape)},
        )
    if np.any(values < -1e-12) or np.any(np.abs(values.sum(axis=1) - 1.0) > 1e-8):
        raise InputValidationError("weights must lie on the simplex")
    return values


def _mixture_elpd(sc: Scenario, mix: np.ndarray) -> float:
    support = sc.mass > 0
    if np.any(mix[support] <= 0):
        return -math.inf
    return float(np.sum(sc.mass[support] * np.log(mix[support])))


def elpd_of_weights(sc: Scenario, w: WeightInput) -> float:
    """Expected log score of the weighted mixture under the data-generating measure."""
    weights = _weights_on_grid(sc, w)
    mix = np.einsum("ik,kij->ij", weights, sc.densities)
    return _mixture_elpd(sc, mix)


def model_elpds(sc: Scenario) -> np.ndarray:
    return np.array([elpd_of_weights(sc, np.eye(sc.K)[k]) for k in range(sc.K)])


def _margins_against(log_dens: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    """log p_chosen minus the best rival at every grid point."""
    K = log_dens.shape[0]
    chosen_log = np.take_along_axis(log_dens, chosen[None], axis=0)[0]
    if K == 1:
        return np.full(chosen_log.shape, math.inf)
    rivals = log_dens.copy()
    np.put_along_axis(rivals, chosen[None], -np.inf, axis=0)
    with np.errstate(invalid="ignore"):
        margin = chosen_log - rivals.max(axis=0)
    return np.where(np.isnan(margin), 0.0, margin)


def _intervals(x: np.ndarray, diff: np.ndarray, winners: np.ndarray, K: int) -> dict[int, list[tuple[float, float]]]:
    """Contiguous input intervals won by each model, with crossings linearly interpolated."""
    order = np.argsort(x)
    x, winners = x[order], winners[order]
    out: dict[int, list[tuple[float, float]]] = {k: [] for k in range(K)}
    start = float(x[0])
    for i in range(1, x.size + 1):
        if i == x.size or winners[i] != winners[i - 1]:
            if i == x.size:
                end = float(x[-1])
            else:
                end = _crossing(x[i - 1], x[i], diff[:, order][:, i - 1], diff[:, order][:, i], winners[i - 1], winners[i])
            out[int(winners[i - 1])].append((start, end))
            start = end
    return out


def _crossing(x0: float, x1: float, c0: np.ndarray, c1: np.ndarray, k0: int, k1: int) -> float:
    a = c0[k0] - c0[k1]
    b = c1[k0] - c1[k1]
    if a == b:
        return float(0.5 * (x0 + x1))
    t = min(max(a / (a - b), 0.0), 1.0)
    return float(x0 + t * (x1 - x0))


def winner_partition(sc: Scenario) -> Partition:
    """Pointwise winners (ties to the smallest index) and their masses.

    The joint rule compares densities at every (x, y); the input rule compares the
    conditional elpd of each model at every x.
    """
    with np.errstate(divide="ignore"):
        log_dens = np.log(sc.densities)
    winner = np.argmax(sc.densities, axis=0)
    margin = _margins_against(log_dens, winner)
    J_masses = np.array([sc.mass[winner == k].sum() for k in range(sc.K)])

    x_mass = sc.mass.sum(axis=1)
    safe = np.where(x_mass > 0, x_mass, 1.0)
    conditional = sc.mass / safe[:, None]
    with np.errstate(invalid="ignore"):
        celpd = np.stack([np.where(conditional > 0, conditional * log_dens[k], 0.0).sum(axis=1) for k in range(sc.K)])
    input_winner = np.argmax(celpd, axis=0)
    I_masses = np.array([x_mass[input_winner == k].sum() for k in range(sc.K)])
    chosen = np.broadcast_to(input_winner[:, None], sc.mass.shape)
    input_margin = _margins_against(log_dens, np.ascontiguousarray(chosen))

    intervals: dict[int, list[tuple[float, float]]] = {}
    if sc.has_covariate and sc.x_nodes.size > 1:
        finite = np.where(np.isfinite(celpd), celpd, -1e300)
        intervals = _intervals(sc.x_nodes, finite, input_winner, sc.K)
    return Partition(
        winner=winner,
        margin=margin,
        J_masses=J_masses,
        celpd=celpd,
        input_winner=input_winner,
        input_margin=input_margin,
        I_masses=I_masses,
        intervals=intervals,
    )


def _epsilon(sc: Scenario, margin: np.ndarray, L: float) -> float:
    return float(sc.mass[margin < L - MARGIN_SLACK].sum())


def separation_profile(
    sc: Scenario,
    L_grid: np.ndarray | list[float],
    partition: Partition | None = None,
) -> dict[str, np.ndarray]:
    """Mass of points whose winning margin falls below each L, for the joint and the input rule."""
    part = partition or winner_partition(sc)
    grid = np.asarray(L_grid, dtype=float)
    return {
        "L": grid,
        "epsilon": np.array([_epsilon(sc, part.margin, L) for L in grid]),
        "epsilon_input": np.array([_epsilon(sc, part.input_margin, L) for L in grid]),
    }


def max_separation(sc: Scenario, partition: Partition | None = None) -> float:
    """Largest L at which the joint separation holds with zero exceptional mass."""
    part = partition or winner_partition(sc)
    support = sc.mass > 0
    return float(part.margin[support].min()) if support.any() else math.inf


def population_stacking(sc: Scenario) -> np.ndarray:
    """Complete-pooling stacking weights of the population.

    EM on the grid masses, followed by pruning models whose weight vanishes and whose
    KKT gradient sits below one, then a refit on the remaining support.
    """
    support = sc.mass.ravel() > 0
    masses = sc.mass.ravel()[support]
    dens = sc.densities.reshape(sc.K, -1)[:, support].T
    top = dens.max(axis=1)
    if np.any(top <= 0):
        raise ScenarioError("every model has zero density on part of the data-generating support")
    dens = dens / top[:, None]

    active = np.arange(sc.K)
    weights = np.zeros(sc.K)
    for _ in range(sc.K):
        w, _, iters, converged, _ = em_simplex(dens[:, active], masses, max_iters=100000, tol=POPULATION_TOL)
        if not converged:
            logger.warning("population stacking em stopped iters=%s", iters)
        weights[:] = 0.0
        weights[active] = w
        mix = dens @ weights
        grad = (masses / mix) @ dens / masses.sum()
        vanishing = [k for k in active if weights[k] < ZERO_WEIGHT and grad[k] < 1.0]
        if not vanishing or len(vanishing) == active.size:
            break
        active = np.array([k for k in active if k not in vanishing])
    return weights


def _provable_zero_weight_bound(L: float, eps: float) -> float:
    return math.exp(-L) + eps * (1.0 - math.exp(-L))


def _stated_zero_weight_bound(L: float, eps: float) -> float:
    return 1.0 / (1.0 + math.expm1(L) * (1.0 - eps) + eps)


def _weight_constant(w: np.ndarray) -> float:
    if np.any(w <= 0):
        return math.inf
    return float(np.sum((1.0 - w) / w))


def gain_bounds(L: float, K: int, rho: float, eps: float) -> tuple[float, float]:
    """The coarse and the refined lower bounds on the stacking gain over the best single model."""
    g = L * (1.0 - rho) * (1.0 - eps) - math.log(K)
    rest = 0.0 if K == 1 else float(xlogy(1.0 - rho, 1.0 - rho) - (1.0 - rho) * math.log(K - 1))
    g_star = L * (1.0 - rho) * (1.0 - eps) + float(xlogy(rho, rho)) + rest
    return g, g_star


def is_identifiable(sc: Scenario) -> bool:
    support = sc.mass > 0
    flat = sc.densities[:, support]
    for a in range(sc.K):
        for b in range(a + 1, sc.K):
            if np.allclose(flat[a], flat[b], rtol=0, atol=1e-14):
                return False
    return True


def _selection_partition(sc: Scenario, part: Partition, partition: str) -> tuple[str, np.ndarray, np.ndarray]:
    if partition == "auto":
        partition = "input" if sc.has_covariate else "joint"
    if partition == "input":
        return partition, np.broadcast_to(part.input_winner[:, None], sc.mass.shape), part.input_margin
    if partition == "joint":
        return partition, part.winner, part.margin
    raise InputValidationError(f"unknown partition: {partition}", {"partitions": ["auto", "input", "joint"]})


def pointwise_selection_elpd(sc: Scenario, partition: str = "auto", part: Partition | None = None) -> float:
    """elpd of selecting the winning model of each region."""
    part = part or winner_partition(sc)
    _, chosen, _ = _selection_partition(sc, part, partition)
    selected = np.take_along_axis(sc.densities, np.ascontiguousarray(chosen)[None], axis=0)[0]
    return _mixture_elpd(sc, selected)


def _surrogate(sc: Scenario, chosen: np.ndarray, w: np.ndarray) -> float:
    selected = np.take_along_axis(sc.densities, np.ascontiguousarray(chosen)[None], axis=0)[0]
    with np.errstate(divide="ignore"):
        return _mixture_elpd(sc, w[chosen] * selected)


def theorem_bounds(sc: Scenario, L: float, partition: str = "auto") -> TheoremReport:
    """Numeric check of the four stacking bounds at separation margin L."""
    if not L > 0:
        raise InputValidationError("the separation margin L must be positive", {"L": L})
    part = winner_partition(sc)
    eps = _epsilon(sc, part.margin, L)
    w_s = population_stacking(sc)
    elpd_s = elpd_of_weights(sc, w_s)
    checks: list[BoundCheck] = []

    dropped = [int(k) for k in np.flatnonzero(w_s == 0)]
    kept = [k for k in range(sc.K) if k not in dropped]
    sub = sc.restricted(kept) if dropped else sc
    sub_part = winner_partition(sub) if dropped else part
    sub_eps = _epsilon(sub, sub_part.margin, L)
    w_a_sub = sub_part.J_masses
    gap = abs(elpd_of_weights(sub, w_a_sub) - elpd_of_weights(sub, w_s[kept]))
    constant = _weight_constant(w_a_sub) + _weight_constant(w_s[kept])
    bound = constant * (sub_eps + math.exp(-L))
    checks.append(
        BoundCheck(
            name="T1",
            value=gap,
            bound=bound if math.isfinite(bound) else None,
            passed=bool(gap <= bound + BOUND_SLACK),
            constant=constant if math.isfinite(constant) else None,
            note=None if not dropped else f"models {dropped} have zero stacking weight and were dropped",
            extra={"epsilon": sub_eps, "constant_defined": bool(math.isfinite(constant))},
        )
    )

    for k in dropped:
        provable = _provable_zero_weight_bound(L, eps)
        checks.append(
            BoundCheck(
                name=f"T2[{k}]",
                value=float(part.J_masses[k]),
                bound=provable,
                passed=bool(part.J_masses[k] <= provable + KKT_SLACK),
                extra={"stated_bound": _stated_zero_weight_bound(L, eps)},
            )
        )

    elpds = model_elpds(sc)
    best = float(elpds.max())
    gain = elpd_s - best
    g, g_star = gain_bounds(L, sc.K, part.rho, eps)
    floor = g_star - eps * max(1.0, L * part.rho)
    checks.append(
        BoundCheck(
            name="T3",
            value=gain,
            bound=floor,
            passed=bool(gain >= floor - BOUND_SLACK),
            extra={"g": g, "g_star": g_star, "g_star_minus_eps": g_star - eps, "g_le_g_star": bool(g <= g_star + BOUND_SLACK)},
        )
    )

    rule, chosen, chosen_margin = _selection_partition(sc, part, partition)
    selection = pointwise_selection_elpd(sc, rule, part)
    masses = part.I_masses if rule == "input" else part.J_masses
    rho_p = float(masses.max())
    correction = elpd_s - _surrogate(sc, chosen, w_s)
    selection_gain = selection - elpd_s
    floor = -math.log(rho_p) - correction
    eps_p = _epsilon(sc, chosen_margin, L)
    explicit = -math.log(rho_p) - (eps_p + math.exp(-L)) * _weight_constant(w_s)
    checks.append(
        BoundCheck(
            name="T4",
            value=selection_gain,
            bound=floor if math.isfinite(floor) else None,
            passed=bool(selection_gain >= floor - BOUND_SLACK) if math.isfinite(floor) else True,
            note=f"{rule} partition",
            extra={
                "correction": correction,
                "rho_partition": rho_p,
                "epsilon_partition": eps_p,
                "explicit_bound": explicit if math.isfinite(explicit) else None,
                "explicit_passed": bool(selection_gain >= explicit - BOUND_SLACK),
            },
        )
    )
    checks.append(
        BoundCheck(
            name="T3_monotone",
            value=g,
            bound=g_star,
            passed=bool(g <= g_star + BOUND_SLACK),
            note="coarse gain bound never exceeds the refined one",
        )
    )

    report = TheoremReport(
        L=float(L),
        epsilon=eps,
        epsilon_input=_epsilon(sc, part.input_margin, L),
        rho=part.rho,
        rho_x=part.rho_x,
        w_stacking=w_s,
        w_approx=part.J_masses,
        identifiable=is_identifiable(sc),
        dropped_models=dropped,
        checks=checks,
    )
    logger.info(
        "theorem bounds L=%.4g epsilon=%.4g all_passed=%s dropped=%s",
        report.L,
        report.epsilon,
        report.all_passed,
        dropped,
    )
    return report


def pseudo_bma_weight(sc: Scenario, n: float) -> np.ndarray:
    """Expected pseudo-BMA weights: softmax of n times each model's elpd."""
    elpds = model_elpds(sc)
    if np.any(~np.isfinite(elpds)):
        finite = np.isfinite(elpds)
        if not finite.any():
            raise ScenarioError("every model has -inf elpd")
        out = finite / finite.sum()
        return out.astype(float)
    scaled = n * elpds
    scaled = scaled - scaled.max()
    w = np.exp(scaled)
    return w / w.sum()


def delta_curve(
    deltas: np.ndarray | list[float],
    *,
    n_values: tuple[int, ...] = (1, 10),
    cells: int | None = None,
    right_upper: float = 2.0,
) -> dict[str, Any]:
    """Stacking and pseudo-BMA weight of model 1 across the spike-and-slab family.

    The stacking weight is undefined where the two models coincide (delta = 0.5).
    """
    rows = []
    for delta in np.asarray(deltas, dtype=float):
        sc = spike_slab(float(delta), cells, right_upper)
        defined = is_identifiable(sc)
        w1 = float(population_stacking(sc)[0]) if defined else math.nan
        row: dict[str, Any] = {"delta": float(delta), "w1_stacking": w1, "stacking_defined": defined}
        for n in n_values:
            row[f"w1_bma_n{n}"] = float(pseudo_bma_weight(sc, n)[0])
        rows.append(row)

    defined_rows = [r for r in rows if r["stacking_defined"] and 0 < r["delta"] < 0.5]
    stacking = np.array([r["w1_stacking"] for r in defined_rows])
    bma = np.array([r[f"w1_bma_n{n_values[0]}"] for r in rows if 0 < r["delta"] < 1])
    return {
        "rows": rows,
        "stacking_non_decreasing": bool(np.all(np.diff(stacking) >= -1e-6)),
        "bma_strictly_decreasing": bool(np.all(np.diff(bma) < 0)),
    }
