from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from app.services.core import FeatureSet, InputValidationError, LpdMatrix, relabel_cells

logger = logging.getLogger(__name__)

OBS_ID = "obs_id"
CELL = "cell"
DRAW_COLUMNS = ("chain", "draw")


def _read_csv(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise InputValidationError(f"file not found: {path}", {"path": str(path)})
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputValidationError(f"cannot parse {path}: {exc}", {"path": str(path)}) from exc
    if frame.empty:
        raise InputValidationError(f"no rows in {path}", {"path": str(path)})
    return frame


def _numeric(frame: pd.DataFrame, columns: list[str], path: str | Path) -> np.ndarray:
    try:
        values = frame[columns].apply(pd.to_numeric, errors="raise").to_numpy(dtype=float)
    except (ValueError, TypeError) as exc:
        raise InputValidationError(f"non-numeric values in {path}: {exc}", {"path": str(path)}) from exc
    return values


def read_lpd(path: str | Path) -> LpdMatrix:
    """obs_id,<model names...> with one row per observation."""
    frame = _read_csv(path)
    if OBS_ID in frame.columns:
        ids = tuple(str(v) for v in frame[OBS_ID])
        models = [c for c in frame.columns if c != OBS_ID]
    else:
        ids = ()
        models = list(frame.columns)
    if not models:
        raise InputValidationError(f"no model columns in {path}", {"path": str(path)})
    return LpdMatrix(values=_numeric(frame, models, path), obs_ids=ids, model_names=tuple(str(m) for m in models))


def write_lpd(path: str | Path, lpd: LpdMatrix) -> Path:
    frame = pd.DataFrame(lpd.values, columns=list(lpd.model_names))
    frame.insert(0, OBS_ID, list(lpd.obs_ids))
    return _write_frame(path, frame)


def read_features(
    path: str | Path,
    *,
    time_column: str | None = None,
    group_of_feature: list[str] | None = None,
) -> tuple[FeatureSet, np.ndarray | None]:
    """obs_id,cell,<feature columns...>; the cell and time columns are optional."""
    frame = _read_csv(path)
    ids = tuple(str(v) for v in frame[OBS_ID]) if OBS_ID in frame.columns else ()
    cell_index = None
    labels: tuple[str, ...] = ()
    if CELL in frame.columns:
        cell_index, labels = relabel_cells(frame[CELL].astype(str).to_numpy())
    times = None
    if time_column:
        if time_column not in frame.columns:
            raise InputValidationError(f"time column {time_column!r} missing from {path}", {"path": str(path)})
        times = _numeric(frame, [time_column], path)[:, 0]
    skip = {OBS_ID, CELL, time_column}
    columns = [c for c in frame.columns if c not in skip]
    features = _numeric(frame, columns, path) if columns else None
    groups = None
    if group_of_feature is not None:
        if len(group_of_feature) != len(columns):
            raise InputValidationError(
                "group_of_feature length does not match feature columns",
                {"groups": len(group_of_feature), "columns": len(columns)},
            )
        groups = np.asarray(group_of_feature)
    if cell_index is None and features is None:
        raise InputValidationError(f"{path} has neither a cell column nor feature columns", {"path": str(path)})
    feats = FeatureSet(
        cell_index=cell_index,
        features=features,
        group_of_feature=groups,
        cell_labels=labels,
        obs_ids=ids,
    )
    return feats, times


def write_features(path: str | Path, feats: FeatureSet, obs_ids: tuple[str, ...] | None = None) -> Path:
    ids = list(obs_ids or feats.obs_ids or [str(i + 1) for i in range(feats.n)])
    frame = pd.DataFrame({OBS_ID: ids})
    if feats.cell_index is not None:
        labels = feats.cell_labels or tuple(str(j) for j in range(int(np.max(feats.cell_index)) + 1))
        frame[CELL] = [labels[j] for j in feats.cell_index]
    if feats.features is not None:
        for m in range(feats.n_features):
            frame[f"f{m + 1}"] = feats.features[:, m]
    return _write_frame(path, frame)


def read_loglik(path: str | Path) -> tuple[np.ndarray, tuple[str, ...]]:
    """S rows of draws by n observation columns; the header holds observation ids."""
    frame = _read_csv(path)
    columns = [c for c in frame.columns if c not in DRAW_COLUMNS]
    return _numeric(frame, columns, path), tuple(str(c) for c in columns)


def write_loglik(path: str | Path, loglik: np.ndarray, obs_ids: tuple[str, ...] | None = None) -> Path:
    ids = list(obs_ids or [str(i + 1) for i in range(loglik.shape[1])])
    return _write_frame(path, pd.DataFrame(loglik, columns=ids))


def write_draws(path: str | Path, theta: np.ndarray, chain_ids: np.ndarray, names: list[str]) -> Path:
    frame = pd.DataFrame(theta, columns=names)
    draw = np.zeros(len(chain_ids), dtype=int)
    for chain in np.unique(chain_ids):
        members = np.flatnonzero(chain_ids == chain)
        draw[members] = np.arange(members.size)
    frame.insert(0, "draw", draw)
    frame.insert(0, "chain", np.asarray(chain_ids, dtype=int))
    return _write_frame(path, frame)


def read_draws(path: str | Path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    frame = _read_csv(path)
    missing = [c for c in DRAW_COLUMNS if c not in frame.columns]
    if missing:
        raise InputValidationError(f"draw table {path} lacks columns {missing}", {"path": str(path)})
    names = [c for c in frame.columns if c not in DRAW_COLUMNS]
    theta = _numeric(frame, names, path)
    if not np.all(np.isfinite(theta)):
        raise InputValidationError(f"non-finite draws in {path}", {"path": str(path)})
    return theta, frame["chain"].to_numpy(dtype=int), names


def read_model(path: str | Path, schema: type[BaseModel]) -> Any:
    path = Path(path)
    if not path.is_file():
        raise InputValidationError(f"file not found: {path}", {"path": str(path)})
    try:
        return schema.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise InputValidationError(
            f"invalid {schema.__name__} in {path}",
            {"path": str(path), "errors": json.loads(exc.json())},
        ) from exc


def write_json(path: str | Path, payload: BaseModel | dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, default=_jsonable)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def write_csv(path: str | Path, rows: list[dict[str, Any]] | pd.DataFrame) -> Path:
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows)
    return _write_frame(path, frame)


def _write_frame(path: str | Path, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info("wrote path=%s rows=%s", path, len(frame))
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return str(value)
