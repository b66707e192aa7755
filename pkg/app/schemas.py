from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field, field_validator, model_validator

from app.config import settings


PRIOR_KINDS = ("basic", "grouped", "feature_decomposed", "correlated", "gp")
FIT_METHODS = ("complete", "nopool", "additive", "hier", "map")
SCENARIO_KINDS = ("spike_slab", "bernoulli_sqrt", "piecewise_custom")
GEN_KINDS = ("spike_slab", "bernoulli_sqrt", "cells", "neal", "varying")


class FitOptions(BaseModel):
    max_iters: int = Field(default_factory=lambda: settings.em_max_iters, ge=1)
    tol: float = Field(default_factory=lambda: settings.em_tol, gt=0)
    restarts: int = Field(default=0, ge=0)
    coef_bound: float = Field(default_factory=lambda: settings.coef_bound, gt=0)


class SamplerConfig(BaseModel):
    chains: int = Field(default_factory=lambda: settings.chains, ge=1)
    warmup: int = Field(default_factory=lambda: settings.warmup, ge=100)
    draws_per_chain: int = Field(default_factory=lambda: settings.draws, ge=1)
    seed: int = Field(default_factory=lambda: settings.default_seed, ge=0, lt=2**63)
    target_accept: float = Field(default_factory=lambda: settings.target_accept, ge=0.6, le=0.99)
    max_leapfrog: int = Field(default_factory=lambda: settings.max_leapfrog, ge=1)
    divergence_energy: float = Field(default_factory=lambda: settings.divergence_energy, gt=0)


class KernelConfig(BaseModel):
    kind: Literal["exp_quad", "zero_one"] = "exp_quad"
    rho_shape: float = Field(default=4.0, gt=0)
    rho_scale: float = Field(default=1.0, gt=0)
    jitter: float = Field(default=1e-8, gt=0)


class PriorConfig(BaseModel):
    kind: Literal["basic", "grouped", "feature_decomposed", "correlated", "gp"] = "basic"
    tau_mu: float = Field(default=1.0, gt=0)
    tau_sigma: float | list[float] = 1.0
    mu0: float = 0.0
    sample_mu0: bool = False
    inv_gamma_a: float = Field(default=2.0, gt=0)
    inv_gamma_b: float = Field(default=1.0, gt=0)
    omega: list[list[float]] | None = None
    kernel: KernelConfig | None = None
    scale_by_features: bool = False
    centered: bool = False

    @field_validator("tau_sigma")
    @classmethod
    def _positive_scales(cls, value: float | list[float]) -> float | list[float]:
        values = value if isinstance(value, list) else [value]
        if not values or any(v <= 0 for v in values):
            raise ValueError("tau_sigma must be positive")
        return value


class TimeWeightConfig(BaseModel):
    gamma: float = Field(gt=0)
    horizon: float = Field(gt=0)
    column: str = "t"


class FitConfig(BaseModel):
    prior: PriorConfig = PriorConfig()
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    time_weights: TimeWeightConfig | None = None
    options: FitOptions = Field(default_factory=FitOptions)
    check_diagnostics: bool = True
    unseen_cells: Literal["error", "hierarchical_mean"] = "hierarchical_mean"
    rectify: bool = False
    standardize: bool = False


class WeightReport(BaseModel):
    method: Literal["complete", "nopool", "additive", "hier", "map"]
    weights: list[float] | list[list[float]]
    objective: float | None = None
    iters: int = 0
    converged: bool = True
    meta: dict[str, Any] = {}


class DiagnosticsReport(BaseModel):
    param_names: list[str]
    rhat: list[float | None]
    ess_bulk: list[float | None]
    ess_tail: list[float | None]
    divergences: int
    divergent_fraction: float
    step_size: list[float]
    rhat_available: bool
    passed: bool


class HierSummary(BaseModel):
    method: Literal["hier"] = "hier"
    prior_kind: str
    mean_weights: list[list[float]]
    cell_weights: list[list[float]] | None = None
    cell_labels: list[str] | None = None
    diagnostics: DiagnosticsReport


class LooReport(BaseModel):
    elpd: float
    se: float
    pointwise: list[float]
    khat: list[float | None]
    flagged: list[int]
    status: Literal["good", "ok", "unreliable"]


class BoundCheck(BaseModel):
    name: str
    value: float | None
    bound: float | None
    passed: bool
    constant: float | None = None
    note: str | None = None
    extra: dict[str, Any] = {}


class TheoremReportOut(BaseModel):
    L: float
    epsilon: float
    rho: float
    rho_x: float
    w_stacking: list[float]
    w_approx: list[float]
    identifiable: bool
    dropped_models: list[int] = []
    checks: list[BoundCheck]
    all_passed: bool


class TheoryPoint(BaseModel):
    delta: float | None = None
    identifiable: bool
    stacking_defined: bool
    model_elpds: list[float | None]
    selection_elpd: float | None = None
    winner_masses: list[float]
    intervals: dict[str, list[list[float]]] = {}
    report: TheoremReportOut | None = None


class TheoryOut(BaseModel):
    scenario: str
    points: list[TheoryPoint]
    stacking_non_decreasing: bool | None = None
    bma_strictly_decreasing: bool | None = None
    all_passed: bool
    curves: list[str] = []


class PsisOut(BaseModel):
    models: list[str]
    n: int
    draws: int
    grouped: bool
    khat_max: dict[str, float | None]
    flagged: dict[str, list[int]]
    status: dict[str, Literal["good", "ok", "unreliable"]]
    lpd_path: str | None = None


class SimulateOut(BaseModel):
    kind: str
    n: int
    seed: int
    files: list[str]
    truth: dict[str, Any] = {}


class ScenarioSpec(BaseModel):
    kind: Literal["spike_slab", "bernoulli_sqrt", "piecewise_custom"] = "spike_slab"
    delta: float = Field(default=0.01, ge=0, le=1)
    right_upper: float = Field(default=2.0, gt=0)
    grid_cells: int = Field(default_factory=lambda: settings.grid_cells, ge=10)
    quadrature_nodes: int = Field(default_factory=lambda: settings.quadrature_nodes, ge=20)
    x_edges: list[float] | None = None
    y_edges: list[float] | None = None
    dg_values: list[list[float]] | None = None
    model_values: list[list[list[float]]] | None = None

    @model_validator(mode="after")
    def _custom_arrays(self) -> "ScenarioSpec":
        if self.kind == "piecewise_custom":
            if self.y_edges is None or self.dg_values is None or self.model_values is None:
                raise ValueError("piecewise_custom needs y_edges, dg_values and model_values")
        return self


class GenConfig(BaseModel):
    kind: Literal["spike_slab", "bernoulli_sqrt", "cells", "neal", "varying"]
    n: int = Field(default=1000, ge=1)
    seed: int = Field(default_factory=lambda: settings.default_seed, ge=0, lt=2**63)
    delta: float = Field(default=0.01, ge=0, le=1)
    outlier_prob: float = Field(default=0.05, ge=0, le=1)
    n_cells: int = Field(default=2, ge=1)
    n_models: int = Field(default=2, ge=2)
    n_per_cell: list[int] | None = None
    effect_size: float = Field(default=1.0, ge=0)
    slope: float = 1.5
    out: str | None = None


class RunManifest(BaseModel):
    command: str
    config_hash: str
    seed: int | None = None
    inputs: dict[str, str] = {}
    outputs: list[str] = []
    versions: dict[str, str] = {}
    wall_time_seconds: float = 0.0
    exit_code: int = 0


class ErrorPayload(BaseModel):
    error: str
    exit_code: int
    message: str
    details: dict[str, Any] = {}
