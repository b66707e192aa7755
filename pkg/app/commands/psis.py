from __future__ import annotations

import argparse
import logging
from pathlib import Path

import numpy as np

from app.commands.common import CommandResult, add_out, out_path
from app.schemas import PsisOut
from app.services.core import InputValidationError, LpdMatrix
from app.services.io import read_features, read_loglik, write_lpd
from app.services.psis import loco_lpd, psis_loo

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("psis", help="merge per-model log likelihood draws into an LpdMatrix")
    parser.add_argument(
        "--loglik",
        type=Path,
        nargs="+",
        required=True,
        help="one S x n log likelihood CSV per model; columns are obs ids",
    )
    parser.add_argument("--names", nargs="+", help="model names, one per --loglik file")
    parser.add_argument("--features", type=Path, help="FeatureSet CSV; its cell column drives --group-by-cell")
    parser.add_argument("--group-by-cell", action="store_true", help="leave one cell out instead of one point")
    add_out(parser)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> CommandResult:
    names = args.names or [Path(p).stem for p in args.loglik]
    if len(names) != len(args.loglik):
        raise InputValidationError("--names needs one entry per --loglik file")
    if len(set(names)) != len(names):
        raise InputValidationError("model names must be distinct", {"names": names})

    cells = None
    inputs = [str(p) for p in args.loglik]
    if args.group_by_cell:
        if args.features is None:
            raise InputValidationError("--group-by-cell needs --features with a cell column")
        feats, _ = read_features(args.features)
        if feats.cell_index is None:
            raise InputValidationError(f"{args.features} has no cell column")
        cells = feats.cell_index
        inputs.append(str(args.features))

    columns = []
    obs_ids: tuple[str, ...] | None = None
    khat_max: dict[str, float | None] = {}
    flagged: dict[str, list[int]] = {}
    status: dict[str, str] = {}
    draws = 0
    for name, path in zip(names, args.loglik):
        loglik, ids = read_loglik(path)
        if obs_ids is None:
            obs_ids = ids
        elif ids != obs_ids:
            raise InputValidationError(f"observation ids in {path} differ from {args.loglik[0]}", {"path": str(path)})
        result = loco_lpd(loglik, cells, threads=args.threads) if cells is not None else psis_loo(loglik, threads=args.threads)
        columns.append(result.lpd)
        finite = result.khat[np.isfinite(result.khat)]
        khat_max[name] = float(finite.max()) if finite.size else None
        flagged[name] = result.flagged
        status[name] = result.status
        draws = max(draws, loglik.shape[0])
        logger.info("psis model=%s status=%s flagged=%s", name, result.status, len(result.flagged))

    lpd = LpdMatrix(values=np.column_stack(columns), obs_ids=obs_ids or (), model_names=tuple(names))
    outputs: list[str] = []
    lpd_path = None
    if args.out is not None:
        lpd_path = str(write_lpd(out_path(args, "lpd.csv"), lpd))
        outputs.append(lpd_path)
    payload = PsisOut(
        models=names,
        n=lpd.n,
        draws=draws,
        grouped=cells is not None,
        khat_max=khat_max,
        flagged=flagged,
        status=status,  # type: ignore[arg-type]
        lpd_path=lpd_path,
    )
    return CommandResult(payload=payload, inputs=inputs, outputs=outputs, seed=args.seed)
