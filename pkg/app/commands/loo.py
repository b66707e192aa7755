from __future__ import annotations

import argparse
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from app.commands.common import CommandResult, add_fit_inputs, add_out, load_config, load_inputs, out_path
from app.services.core import InputValidationError
from app.services.hier import build_model, draws_from_theta
from app.services.io import read_draws, write_csv, write_json
from app.services.priors import prior_from_config
from app.services.psis import MIN_DRAWS, stacked_loo

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("loo", help="leave-one-out elpd of the stacked predictive")
    add_fit_inputs(parser)
    parser.add_argument("--draws", type=Path, dest="draw_table", help="draw table written by `fit --method hier`")
    add_out(parser)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> CommandResult:
    if args.config is None and args.draw_table is not None:
        sibling = Path(args.draw_table).parent / "fit_config.json"
        if sibling.is_file():
            args.config = sibling
    cfg = load_config(args)
    lpd, feats, _, inputs = load_inputs(args, cfg)

    if lpd.K == 1:
        # a single model has weight one in every draw
        S = MIN_DRAWS
        if args.draw_table is not None:
            S = max(read_draws(args.draw_table)[0].shape[0], MIN_DRAWS)
            inputs.append(str(args.draw_table))
        weights = np.ones((S, lpd.n, 1))
    else:
        if args.draw_table is None:
            raise InputValidationError("loo needs --draws for more than one model")
        theta, chain_ids, names = read_draws(args.draw_table)
        inputs.append(str(args.draw_table))
        model = build_model(lpd, feats, prior_from_config(cfg.prior), unseen_cells=cfg.unseen_cells)
        if names != model.layout.names():
            raise InputValidationError(
                "draw table columns do not match the model parameters",
                {"expected": model.layout.size, "got": len(names)},
            )
        weights = draws_from_theta(model, theta, chain_ids)

    result = stacked_loo(lpd, weights, threads=args.threads)
    payload = result.to_report()
    outputs: list[str] = []
    if args.out is not None:
        outputs.append(str(write_json(out_path(args, "loo.json"), payload)))
        frame = pd.DataFrame({"obs_id": list(lpd.obs_ids), "elpd": result.pointwise, "khat": result.khat})
        outputs.append(str(write_csv(out_path(args, "loo_pointwise.csv"), frame)))
    return CommandResult(payload=payload, inputs=inputs, outputs=outputs, seed=args.seed)
