from __future__ import annotations

import argparse
import logging
from typing import Any

import numpy as np
import pandas as pd

from app.commands.common import CommandResult, add_out, out_path
from app.schemas import GEN_KINDS, GenConfig, SimulateOut
from app.services.io import write_csv, write_features, write_json, write_lpd
from app.services.synth import (
    SyntheticData,
    gen_bernoulli_sqrt,
    gen_cells,
    gen_neal_regression,
    gen_spike_slab,
    gen_varying_weights,
)

logger = logging.getLogger(__name__)

# per-observation truth arrays stay in truth.json only
SUMMARY_LIMIT = 100


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("simulate", help="generate a synthetic stacking dataset")
    parser.add_argument("--kind", choices=[k.replace("_", "-") for k in GEN_KINDS], required=True)
    parser.add_argument("--n", type=int, default=1000, help="observations (cells: per cell unless --n-per-cell)")
    parser.add_argument("--delta", type=float, default=0.01)
    parser.add_argument("--outlier-prob", type=float, default=0.05)
    parser.add_argument("--n-cells", type=int, default=2)
    parser.add_argument("--n-models", type=int, default=2)
    parser.add_argument("--n-per-cell", type=int, nargs="+")
    parser.add_argument("--effect-size", type=float, default=1.0)
    parser.add_argument("--slope", type=float, default=1.5)
    add_out(parser, required=True)
    parser.set_defaults(handler=run)


def generate(cfg: GenConfig) -> SyntheticData:
    if cfg.kind == "spike_slab":
        return gen_spike_slab(cfg.delta, cfg.n, cfg.seed)
    if cfg.kind == "bernoulli_sqrt":
        return gen_bernoulli_sqrt(cfg.n, cfg.seed)
    if cfg.kind == "cells":
        counts = cfg.n_per_cell if cfg.n_per_cell is not None else cfg.n
        return gen_cells(cfg.n_cells, cfg.n_models, counts, cfg.effect_size, cfg.seed)
    if cfg.kind == "varying":
        return gen_varying_weights(cfg.n, cfg.n_models, cfg.seed, cfg.slope)
    return gen_neal_regression(cfg.n, cfg.seed, cfg.outlier_prob)


def _jsonable_truth(truth: dict[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in truth.items():
        if isinstance(value, np.ndarray):
            out[key] = value.tolist()
        elif isinstance(value, np.generic):
            out[key] = value.item()
        else:
            out[key] = value
    return out


def run(args: argparse.Namespace) -> CommandResult:
    cfg = GenConfig(
        kind=args.kind.replace("-", "_"),
        n=args.n,
        seed=args.seed,
        delta=args.delta,
        outlier_prob=args.outlier_prob,
        n_cells=args.n_cells,
        n_models=args.n_models,
        n_per_cell=args.n_per_cell,
        effect_size=args.effect_size,
        slope=args.slope,
        out=str(args.out),
    )
    data = generate(cfg)
    outputs: list[str] = []
    if data.lpd is not None:
        outputs.append(str(write_lpd(out_path(args, "lpd.csv"), data.lpd)))
    if data.feats is not None:
        outputs.append(str(write_features(out_path(args, "features.csv"), data.feats, data.lpd.obs_ids if data.lpd else None)))
    if data.lpd is None and data.y is not None:
        frame = pd.DataFrame({"obs_id": [str(i + 1) for i in range(data.y.size)], "y": data.y})
        if data.x is not None:
            frame.insert(1, "x", data.x)
        outputs.append(str(write_csv(out_path(args, "observations.csv"), frame)))

    truth = _jsonable_truth(data.truth)
    outputs.append(str(write_json(out_path(args, "truth.json"), truth)))
    n = data.lpd.n if data.lpd is not None else int(np.size(data.y))
    summary = {key: value for key, value in truth.items() if not isinstance(value, list) or len(value) <= SUMMARY_LIMIT}
    payload = SimulateOut(kind=cfg.kind, n=n, seed=cfg.seed, files=list(outputs), truth=summary)
    logger.info("simulate finished kind=%s n=%s seed=%s", cfg.kind, n, cfg.seed)
    return CommandResult(payload=payload, outputs=outputs, seed=cfg.seed)
