from __future__ import annotations

import hashlib
import json
import logging
import platform
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import scipy
from sqlalchemy.exc import SQLAlchemyError

from app.config import settings
from app.db import SessionLocal, init_db
from app.models import RunRecord
from app.schemas import RunManifest
from app.services.io import write_json

logger = logging.getLogger(__name__)

# arguments left out of the config hash
UNHASHED_KEYS = ("out", "threads", "log_level", "handler")


def _canonical(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in sorted(value.items(), key=lambda item: str(item[0]))}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.generic):
        return value.item()
    return value


def config_hash(arguments: dict[str, Any]) -> str:
    payload = {k: v for k, v in arguments.items() if k not in UNHASHED_KEYS}
    text = json.dumps(_canonical(payload), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def versions() -> dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "app": settings.app_version,
    }


def build_manifest(
    command: str,
    arguments: dict[str, Any],
    *,
    seed: int | None,
    inputs: list[str | Path] | None = None,
    outputs: list[str | Path] | None = None,
    wall_time: float = 0.0,
    exit_code: int = 0,
) -> RunManifest:
    hashed_inputs: dict[str, str] = {}
    for path in inputs or []:
        if path and Path(path).is_file():
            hashed_inputs[str(path)] = file_sha256(path)
    return RunManifest(
        command=command,
        config_hash=config_hash(arguments),
        seed=seed,
        inputs=hashed_inputs,
        outputs=[str(p) for p in outputs or []],
        versions=versions(),
        wall_time_seconds=round(float(wall_time), 6),
        exit_code=exit_code,
    )


def write_manifest(out_dir: str | Path, manifest: RunManifest) -> Path:
    return write_json(Path(out_dir) / "manifest.json", manifest)


def record_run(manifest: RunManifest) -> str | None:
    """Best-effort ledger row; returns the record id or None when the ledger is off or unavailable."""
    if not settings.ledger_enabled:
        return None
    try:
        init_db()
        with SessionLocal() as db:
            record = RunRecord(
                command=manifest.command,
                config_hash=manifest.config_hash,
                seed=manifest.seed,
                exit_code=manifest.exit_code,
                wall_time_seconds=manifest.wall_time_seconds,
                manifest=manifest.model_dump(mode="json"),
            )
            db.add(record)
            db.commit()
            return record.id
    except SQLAlchemyError as exc:
        logger.warning("run ledger write failed command=%s error=%s", manifest.command, exc)
        return None


def recent_runs(limit: int = 20) -> list[RunRecord]:
    init_db()
    with SessionLocal() as db:
        return list(db.query(RunRecord).order_by(RunRecord.created_at.desc()).limit(limit))
