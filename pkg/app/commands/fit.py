from __future__ import annotations

import argparse
import logging

import numpy as np
import pandas as pd

from app.commands.common import CommandResult, add_fit_inputs, add_out, finite_or_none, load_config, load_inputs, out_path
from app.schemas import FIT_METHODS, DiagnosticsReport, HierSummary, WeightReport
from app.services.core import InputValidationError
from app.services.hier import WeightDraws, fit_hierarchical, fit_map, pointwise_differences
from app.services.io import write_csv, write_draws, write_json
from app.services.optimize import fit_additive_mle, fit_complete_pooling, fit_no_pooling
from app.services.priors import prior_from_config

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("fit", help="fit stacking weights")
    parser.add_argument("--method", choices=FIT_METHODS, default="complete")
    add_fit_inputs(parser)
    parser.add_argument("--chains", type=int)
    parser.add_argument("--warmup", type=int)
    parser.add_argument("--draws", type=int, help="post-warmup draws per chain")
    parser.add_argument("--target-accept", type=float)
    parser.add_argument("--fixed-sigma", type=float, help="map: hold the prior scale fixed")
    parser.add_argument("--no-check-diagnostics", action="store_true", help="hier: warn instead of failing")
    parser.add_argument("--explore", action="store_true", help="write pointwise log density differences")
    add_out(parser)
    parser.set_defaults(handler=run)


def diagnostics_report(draws: WeightDraws) -> DiagnosticsReport:
    diag = draws.diagnostics
    return DiagnosticsReport(
        param_names=draws.param_names,
        rhat=finite_or_none(diag["rhat"]),
        ess_bulk=finite_or_none(diag["ess_bulk"]),
        ess_tail=finite_or_none(diag["ess_tail"]),
        divergences=int(diag["divergences"]),
        divergent_fraction=float(diag["divergent_fraction"]),
        step_size=[float(s) for s in diag.get("step_size", [])],
        rhat_available=bool(diag["rhat_available"]),
        passed=bool(diag.get("passed", False)),
    )


def run(args: argparse.Namespace) -> CommandResult:
    cfg = load_config(args)
    lpd, feats, tw, inputs = load_inputs(args, cfg)
    outputs: list[str] = []
    if args.config:
        inputs.append(str(args.config))
    if args.prior:
        inputs.append(str(args.prior))

    if args.method == "complete":
        fit = fit_complete_pooling(lpd, cfg.options, row_weights=None if tw is None else tw.multiplier)
        payload = fit.to_report()
    elif args.method == "nopool":
        if feats is None:
            raise InputValidationError("the nopool method needs --features with a cell column")
        payload = fit_no_pooling(lpd, feats, cfg.options, threads=args.threads).to_report()
    elif args.method == "additive":
        if feats is None:
            raise InputValidationError("the additive method needs --features")
        payload = fit_additive_mle(lpd, feats, cfg.options, seed=args.seed).to_report()
    elif args.method == "map":
        fit = fit_map(lpd, feats, prior_from_config(cfg.prior), fixed_sigma=args.fixed_sigma, tw=tw)
        payload = WeightReport(
            method="map",
            weights=(fit.cell_weights if fit.cell_weights is not None else fit.weights).tolist(),
            objective=float(fit.objective),
            converged=bool(fit.converged),
            meta={
                "grad_norm": fit.grad_norm,
                "fixed_sigma": args.fixed_sigma,
                "cell_labels": list(fit.model.cell_labels) if fit.cell_weights is not None else None,
            },
        )
    else:
        draws = fit_hierarchical(
            lpd,
            feats,
            prior_from_config(cfg.prior),
            cfg.sampler,
            tw,
            check_diagnostics=cfg.check_diagnostics and not args.no_check_diagnostics,
            threads=args.threads,
            unseen_cells=cfg.unseen_cells,
        )
        payload = HierSummary(
            prior_kind=cfg.prior.kind,
            mean_weights=draws.mean_weights.tolist(),
            cell_weights=None if draws.cell_weights is None else draws.cell_weights.tolist(),
            cell_labels=list(draws.model.cell_labels) if draws.cell_weights is not None else None,
            diagnostics=diagnostics_report(draws),
        )
        if args.out is not None:
            outputs.append(str(write_draws(out_path(args, "draws.csv"), draws.theta, draws.chain_ids, draws.param_names)))
            outputs.append(str(write_json(out_path(args, "diagnostics.json"), payload.diagnostics)))
            frame = pd.DataFrame(draws.mean_weights, columns=list(lpd.model_names))
            frame.insert(0, "obs_id", list(lpd.obs_ids))
            outputs.append(str(write_csv(out_path(args, "pointwise_weights.csv"), frame)))

    if args.out is not None:
        outputs.insert(0, str(write_json(out_path(args, "weights.json"), payload)))
        outputs.append(str(write_json(out_path(args, "fit_config.json"), cfg)))
        if args.explore:
            outputs.extend(_write_differences(args, lpd, feats))
    logger.info("fit finished method=%s n=%s K=%s", args.method, lpd.n, lpd.K)
    return CommandResult(payload=payload, inputs=inputs, outputs=outputs, seed=args.seed)


def _write_differences(args: argparse.Namespace, lpd, feats) -> list[str]:  # type: ignore[no-untyped-def]
    delta, cell_means = pointwise_differences(lpd, feats)
    last = lpd.model_names[-1]
    columns = [f"{name}-{last}" for name in lpd.model_names[:-1]]
    frame = pd.DataFrame(delta, columns=columns)
    frame.insert(0, "obs_id", list(lpd.obs_ids))
    written = [str(write_csv(out_path(args, "pointwise_differences.csv"), frame))]
    if cell_means is not None:
        means = pd.DataFrame(cell_means, columns=columns)
        means.insert(0, "cell", list(feats.cell_labels))
        means.insert(1, "n", np.bincount(feats.cell_index, minlength=len(feats.cell_labels)))
        written.append(str(write_csv(out_path(args, "cell_differences.csv"), means)))
    return written
