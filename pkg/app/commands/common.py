from __future__ import annotations

import argparse
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel

from app.schemas import FitConfig, PriorConfig
from app.services.core import FeatureSet, InputValidationError, LpdMatrix, rectify_features, validate
from app.services.hier import TimeWeights, time_reweight
from app.services.io import read_features, read_lpd, read_model

logger = logging.getLogger(__name__)


@dataclass
class CommandResult:
    payload: BaseModel
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    seed: int | None = None


def add_out(parser: argparse.ArgumentParser, *, required: bool = False) -> None:
    parser.add_argument("--out", type=Path, required=required, help="output directory")


def out_path(args: argparse.Namespace, name: str) -> Path | None:
    if args.out is None:
        return None
    return Path(args.out) / name


def add_fit_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lpd", type=Path, required=True, help="LpdMatrix CSV: obs_id,M1..MK")
    parser.add_argument("--features", type=Path, help="FeatureSet CSV: obs_id,cell,<features>")
    parser.add_argument("--config", type=Path, help="FitConfig JSON (prior, sampler, time weights)")
    parser.add_argument("--prior", type=Path, help="PriorConfig JSON; overrides the prior in --config")
    parser.add_argument("--rectify", action="store_true", help="split continuous features at their medians")
    parser.add_argument("--standardize", action="store_true", help="scale rectified features to unit variance")


def load_config(args: argparse.Namespace) -> FitConfig:
    cfg = read_model(args.config, FitConfig) if getattr(args, "config", None) else FitConfig()
    updates: dict[str, Any] = {}
    if getattr(args, "prior", None):
        updates["prior"] = read_model(args.prior, PriorConfig)
    if getattr(args, "rectify", False):
        updates["rectify"] = True
    if getattr(args, "standardize", False):
        updates["standardize"] = True
    sampler_updates = {
        key: value
        for key, value in {
            "chains": getattr(args, "chains", None),
            "warmup": getattr(args, "warmup", None),
            "draws_per_chain": getattr(args, "draws", None),
            "target_accept": getattr(args, "target_accept", None),
        }.items()
        if value is not None
    }
    if getattr(args, "seed", None) is not None:
        sampler_updates["seed"] = args.seed
    if sampler_updates:
        updates["sampler"] = cfg.sampler.model_copy(update=sampler_updates)
    # re-validate so overrides obey the same bounds as file values
    return FitConfig.model_validate({**cfg.model_dump(), **{k: _dump(v) for k, v in updates.items()}})


def _dump(value: Any) -> Any:
    return value.model_dump() if isinstance(value, BaseModel) else value


def load_inputs(
    args: argparse.Namespace,
    cfg: FitConfig,
) -> tuple[LpdMatrix, FeatureSet | None, TimeWeights | None, list[str]]:
    """Read the log density matrix and features, apply rectification and time weights."""
    lpd = read_lpd(args.lpd)
    inputs = [str(args.lpd)]
    feats = None
    times = None
    if getattr(args, "features", None):
        column = cfg.time_weights.column if cfg.time_weights else None
        feats, times = read_features(args.features, time_column=column)
        inputs.append(str(args.features))
        if cfg.rectify:
            if feats.features is None:
                raise InputValidationError("--rectify needs continuous feature columns")
            rectified = rectify_features(feats.features, standardize=cfg.standardize)
            feats = FeatureSet(
                cell_index=feats.cell_index,
                features=rectified.features,
                standardized=rectified.standardized,
                medians=rectified.medians,
                scales=rectified.scales,
                cell_labels=feats.cell_labels,
                constant_columns=rectified.constant_columns,
                obs_ids=feats.obs_ids,
            )
    elif cfg.rectify:
        raise InputValidationError("--rectify needs --features")

    tw = None
    if cfg.time_weights is not None:
        if times is None:
            raise InputValidationError("time weights need a features file with a time column")
        tw = time_reweight(times, cfg.time_weights.horizon, cfg.time_weights.gamma)
    lpd, feats = validate(lpd, feats, min_models=1)
    return lpd, feats, tw, inputs


def finite_or_none(values: np.ndarray | list[float]) -> list[float | None]:
    return [float(v) if np.isfinite(v) else None for v in np.asarray(values, dtype=float).ravel()]


def parse_grid(text: str, *, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """`start:stop:step` with both ends included, e.g. 0.01:0.49:0.02."""
    parts = text.split(":")
    try:
        if len(parts) == 1:
            values = np.array([float(parts[0])])
        elif len(parts) == 3:
            start, stop, step = (float(p) for p in parts)
            if not step > 0 or stop < start:
                raise ValueError("step must be positive and stop must not precede start")
            count = int(np.floor((stop - start) / step + 1e-9)) + 1
            values = start + step * np.arange(count)
        else:
            raise ValueError("expected start:stop:step")
    except ValueError as exc:
        raise InputValidationError(f"invalid grid {text!r}: {exc}", {"grid": text}) from exc
    if not np.all(np.isfinite(values)) or values.min() < low or values.max() > high:
        raise InputValidationError(f"grid {text!r} must lie within [{low}, {high}]", {"grid": text})
    return np.round(values, 12)
