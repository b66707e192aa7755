from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from app.commands import fit, loo, psis, simulate, theory
from app.config import settings
from app.models import EXIT_CODES
from app.schemas import ErrorPayload
from app.services.core import InputValidationError
from app.services.hier import DiagnosticsError
from app.services.io import write_json
from app.services.runs import build_manifest, record_run, write_manifest
from app.services.sampler import SamplerError
from app.services.scenarios import ScenarioError

logger = logging.getLogger("app")

INPUT_ARGUMENTS = ("lpd", "features", "config", "prior", "draw_table", "loglik", "scenario_file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hstack", description=settings.app_name)
    parser.add_argument("--seed", type=int, default=settings.default_seed, help="seed for every random stream")
    parser.add_argument("--threads", type=int, default=settings.threads, help="worker threads for chains, cells and points")
    parser.add_argument("--log-level", default=settings.log_level)
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.app_version}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in (fit, loo, psis, theory, simulate):
        command.register(subparsers)
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )


def _summarize_diagnostics(diag: dict[str, Any]) -> dict[str, Any]:
    rhat = np.asarray(diag.get("rhat", []), dtype=float)
    ess = np.asarray(diag.get("ess_bulk", []), dtype=float)
    finite_rhat = rhat[np.isfinite(rhat)]
    finite_ess = ess[np.isfinite(ess)]
    return {
        "rhat_max": float(finite_rhat.max()) if finite_rhat.size else None,
        "ess_bulk_min": float(finite_ess.min()) if finite_ess.size else None,
        "divergences": int(diag.get("divergences", 0)),
        "rhat_threshold": settings.rhat_max,
        "ess_threshold": settings.ess_min,
    }


def error_payload(exc: Exception) -> ErrorPayload:
    if isinstance(exc, InputValidationError):
        return ErrorPayload(error="input_validation", exit_code=EXIT_CODES["input"], message=exc.message, details=exc.details)
    if isinstance(exc, ScenarioError):
        return ErrorPayload(error="scenario", exit_code=EXIT_CODES["input"], message=exc.message, details=exc.details)
    if isinstance(exc, ValidationError):
        return ErrorPayload(
            error="config_validation",
            exit_code=EXIT_CODES["input"],
            message=f"invalid {exc.title}",
            details={"errors": json.loads(exc.json())},
        )
    if isinstance(exc, SamplerError):
        code = EXIT_CODES["input"] if exc.reason == "init" else EXIT_CODES["diagnostic"]
        return ErrorPayload(error="sampler", exit_code=code, message=exc.message, details={"reason": exc.reason})
    if isinstance(exc, DiagnosticsError):
        return ErrorPayload(
            error="diagnostics",
            exit_code=EXIT_CODES["diagnostic"],
            message=exc.message,
            details=_summarize_diagnostics(exc.diagnostics),
        )
    return ErrorPayload(error="internal", exit_code=EXIT_CODES["internal"], message=f"{type(exc).__name__}: {exc}")


def _input_paths(args: argparse.Namespace) -> list[str]:
    paths: list[str] = []
    for name in INPUT_ARGUMENTS:
        value = getattr(args, name, None)
        for item in value if isinstance(value, list) else [value]:
            if item is not None:
                paths.append(str(item))
    return paths


def _arguments(args: argparse.Namespace) -> dict[str, Any]:
    return {key: value for key, value in vars(args).items() if key != "handler"}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    started = time.perf_counter()
    out_dir: Path | None = getattr(args, "out", None)

    try:
        if not 0 <= args.seed < 2**63:
            raise InputValidationError("--seed must lie in [0, 2**63)", {"seed": args.seed})
        if args.threads is not None and args.threads < 1:
            raise InputValidationError("--threads must be at least 1", {"threads": args.threads})
        result = args.handler(args)
    except Exception as exc:  # noqa: BLE001
        payload = error_payload(exc)
        if payload.exit_code == EXIT_CODES["internal"]:
            logger.exception("command failed command=%s", args.command)
        else:
            logger.error("command failed command=%s error=%s message=%s", args.command, payload.error, payload.message)
        outputs: list[str] = []
        if out_dir is not None:
            outputs.append(str(write_json(Path(out_dir) / "error.json", payload)))
        print(payload.model_dump_json(indent=2))
        manifest = build_manifest(
            args.command,
            _arguments(args),
            seed=args.seed,
            inputs=_input_paths(args),
            outputs=outputs,
            wall_time=time.perf_counter() - started,
            exit_code=payload.exit_code,
        )
        if out_dir is not None:
            write_manifest(out_dir, manifest)
        record_run(manifest)
        return payload.exit_code

    print(result.payload.model_dump_json(indent=2))
    manifest = build_manifest(
        args.command,
        _arguments(args),
        seed=result.seed,
        inputs=result.inputs,
        outputs=result.outputs,
        wall_time=time.perf_counter() - started,
        exit_code=EXIT_CODES["ok"],
    )
    if out_dir is not None:
        write_manifest(out_dir, manifest)
    record_run(manifest)
    logger.info("command finished command=%s wall_time=%.3f", args.command, manifest.wall_time_seconds)
    return EXIT_CODES["ok"]


if __name__ == "__main__":
    raise SystemExit(main())
