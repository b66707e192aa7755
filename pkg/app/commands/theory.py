from __future__ import annotations

import argparse
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np

from app.commands.common import CommandResult, add_out, finite_or_none, out_path, parse_grid
from app.config import settings
from app.schemas import ScenarioSpec, TheoryOut, TheoryPoint
from app.services.core import InputValidationError
from app.services.io import read_model, write_csv, write_json
from app.services.scenarios import Scenario, bernoulli_sqrt, from_spec, spike_slab
from app.services.theory import (
    delta_curve,
    is_identifiable,
    max_separation,
    model_elpds,
    pointwise_selection_elpd,
    separation_profile,
    theorem_bounds,
    winner_partition,
)

logger = logging.getLogger(__name__)

SCENARIOS = ("spike-slab", "bernoulli-sqrt", "custom")
L_GRID_POINTS = 41


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("theory", help="check the stacking bounds on a synthetic scenario")
    parser.add_argument("--scenario", choices=SCENARIOS, default="spike-slab")
    parser.add_argument("--scenario-file", type=Path, help="ScenarioSpec JSON for --scenario custom")
    parser.add_argument("--delta-grid", default="0.01", help="slab probabilities, start:stop:step or one value")
    parser.add_argument("--right-upper", type=float, default=2.0, help="upper end of the second model's spike")
    parser.add_argument("--grid-cells", type=int, help="grid resolution of the spike-and-slab scenario")
    parser.add_argument("--L", type=float, dest="L", help="separation margin; defaults to the largest exact one")
    parser.add_argument("--n-values", type=int, nargs="+", default=[1, 10], help="sample sizes for pseudo-BMA")
    add_out(parser)
    parser.set_defaults(handler=run)


def _margin(sc: Scenario, requested: float | None) -> float | None:
    if requested is not None:
        if not requested > 0:
            raise InputValidationError("--L must be positive", {"L": requested})
        return requested
    L = max_separation(sc)
    if not (math.isfinite(L) and L > 0):
        logger.info("scenario has no positive exact margin kind=%s; pass --L for a bound report", sc.kind)
        return None
    return L


def _evaluate(sc: Scenario, delta: float | None, requested_L: float | None) -> tuple[TheoryPoint, dict[str, Any]]:
    part = winner_partition(sc)
    elpds = model_elpds(sc)
    identifiable = is_identifiable(sc)
    L = _margin(sc, requested_L) if identifiable else None
    report = theorem_bounds(sc, L) if L is not None else None
    point = TheoryPoint(
        delta=delta,
        identifiable=identifiable,
        stacking_defined=identifiable,
        model_elpds=finite_or_none(elpds),
        selection_elpd=pointwise_selection_elpd(sc, part=part),
        winner_masses=[float(m) for m in part.J_masses],
        intervals={str(k): [list(span) for span in spans] for k, spans in part.intervals.items()},
        report=None if report is None else report.to_out(),
    )

    curves: dict[str, Any] = {"separation": [], "gains": []}
    top = 2.0 * L if L is not None else 5.0
    profile = separation_profile(sc, np.linspace(0.0, top, L_GRID_POINTS), part)
    for L_value, eps, eps_x in zip(profile["L"], profile["epsilon"], profile["epsilon_input"]):
        curves["separation"].append({"delta": delta, "L": float(L_value), "epsilon": float(eps), "epsilon_input": float(eps_x)})
    if report is not None:
        t3, t4 = report.check("T3"), report.check("T4")
        curves["gains"].append(
            {
                "delta": delta,
                "L": report.L,
                "epsilon": report.epsilon,
                "gain": t3.value,
                "gain_floor": t3.bound,
                "g": t3.extra["g"],
                "g_star": t3.extra["g_star"],
                "g_star_minus_eps": t3.extra["g_star_minus_eps"],
                "selection_gain": t4.value,
                "selection_floor": t4.bound,
            }
        )
    return point, curves


def _scenarios(args: argparse.Namespace) -> tuple[list[tuple[Scenario, float | None]], list[str], np.ndarray | None]:
    if args.scenario == "spike-slab":
        deltas = parse_grid(args.delta_grid)
        if deltas.min() <= 0 or deltas.max() >= 1:
            raise InputValidationError("slab probabilities must lie strictly between 0 and 1", {"grid": args.delta_grid})
        cells = args.grid_cells or settings.grid_cells
        return [(spike_slab(float(d), cells, args.right_upper), float(d)) for d in deltas], [], deltas
    if args.scenario == "bernoulli-sqrt":
        return [(bernoulli_sqrt(), None)], [], None
    if args.scenario_file is None:
        raise InputValidationError("--scenario custom needs --scenario-file")
    spec = read_model(args.scenario_file, ScenarioSpec)
    return [(from_spec(spec), spec.delta if spec.kind == "spike_slab" else None)], [str(args.scenario_file)], None


def run(args: argparse.Namespace) -> CommandResult:
    scenarios, inputs, deltas = _scenarios(args)
    workers = max(1, args.threads or settings.threads)
    if workers > 1 and len(scenarios) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda item: _evaluate(item[0], item[1], args.L), scenarios))
    else:
        results = [_evaluate(sc, delta, args.L) for sc, delta in scenarios]
    points = [point for point, _ in results]

    outputs: list[str] = []
    non_decreasing = decreasing = None
    curve_rows: list[dict[str, Any]] = []
    if deltas is not None:
        curve = delta_curve(deltas, n_values=tuple(args.n_values), cells=args.grid_cells, right_upper=args.right_upper)
        non_decreasing = curve["stacking_non_decreasing"]
        decreasing = curve["bma_strictly_decreasing"]
        curve_rows = curve["rows"]

    reports = [p.report for p in points if p.report is not None]
    payload = TheoryOut(
        scenario=args.scenario,
        points=points,
        stacking_non_decreasing=non_decreasing,
        bma_strictly_decreasing=decreasing,
        all_passed=all(r.all_passed for r in reports),
    )
    if args.out is not None:
        if curve_rows:
            outputs.append(str(write_csv(out_path(args, "weights_vs_delta.csv"), curve_rows)))
        outputs.append(str(write_csv(out_path(args, "separation.csv"), [row for _, c in results for row in c["separation"]])))
        gains = [row for _, c in results for row in c["gains"]]
        if gains:
            outputs.append(str(write_csv(out_path(args, "gains.csv"), gains)))
        payload.curves = list(outputs)
        outputs.insert(0, str(write_json(out_path(args, "theory.json"), payload)))
    logger.info("theory finished scenario=%s points=%s all_passed=%s", args.scenario, len(points), payload.all_passed)
    return CommandResult(payload=payload, inputs=inputs, outputs=outputs, seed=args.seed)
