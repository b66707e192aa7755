from __future__ import annotations

import os
from dataclasses import dataclass

from dotenv import load_dotenv

load_dotenv()


@dataclass(frozen=True)
class Settings:
    app_name: str = "hstack - hierarchical stacking toolkit"
    app_version: str = "0.4.0"
    db_url: str = os.getenv("HSTACK_DATABASE_URL", "sqlite:///./hstack_runs.db")
    ledger_enabled: bool = os.getenv("HSTACK_LEDGER_ENABLED", "true").strip().lower() in {
        "1",
        "true",
        "yes",
        "on",
    }
    log_level: str = os.getenv("HSTACK_LOG_LEVEL", "INFO").strip().upper()
    threads: int = int(os.getenv("HSTACK_THREADS", "1"))
    default_seed: int = int(os.getenv("HSTACK_SEED", "20240101"))

    chains: int = int(os.getenv("HSTACK_CHAINS", "4"))
    warmup: int = int(os.getenv("HSTACK_WARMUP", "1000"))
    draws: int = int(os.getenv("HSTACK_DRAWS", "1000"))
    target_accept: float = float(os.getenv("HSTACK_TARGET_ACCEPT", "0.8"))
    max_leapfrog: int = int(os.getenv("HSTACK_MAX_LEAPFROG", "64"))
    divergence_energy: float = float(os.getenv("HSTACK_DIVERGENCE_ENERGY", "1000"))
    max_divergent_fraction: float = float(os.getenv("HSTACK_MAX_DIVERGENT_FRACTION", "0.10"))
    rhat_max: float = float(os.getenv("HSTACK_RHAT_MAX", "1.01"))
    ess_min: float = float(os.getenv("HSTACK_ESS_MIN", "100"))

    em_tol: float = float(os.getenv("HSTACK_EM_TOL", "1e-10"))
    em_max_iters: int = int(os.getenv("HSTACK_EM_MAX_ITERS", "100000"))
    coef_bound: float = float(os.getenv("HSTACK_COEF_BOUND", "30"))

    psis_tail_fraction: float = float(os.getenv("HSTACK_PSIS_TAIL_FRACTION", "0.2"))
    psis_tail_sqrt: float = float(os.getenv("HSTACK_PSIS_TAIL_SQRT", "3"))
    khat_good: float = float(os.getenv("HSTACK_KHAT_GOOD", "0.5"))
    khat_ok: float = float(os.getenv("HSTACK_KHAT_OK", "0.7"))

    grid_cells: int = int(os.getenv("HSTACK_GRID_CELLS", "2000"))
    quadrature_nodes: int = int(os.getenv("HSTACK_QUADRATURE_NODES", "10000"))


settings = Settings()
