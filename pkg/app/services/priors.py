from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from app.schemas import PRIOR_KINDS, KernelConfig, PriorConfig
from app.services.core import InputValidationError

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "exp_quad"
    rho_shape: float = 4.0
    rho_scale: float = 1.0
    jitter: float = 1e-8


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "basic"
    tau_mu: float = 1.0
    tau_sigma: tuple[float, ...] = (1.0,)
    mu0: float = 0.0
    sample_mu0: bool = False
    inv_gamma_a: float = 2.0
    inv_gamma_b: float = 1.0
    omega: np.ndarray | None = None
    kernel: KernelSpec | None = None
    scale_by_features: bool = False
    centered: bool = False


def build_prior(
    kind: str = "basic",
    *,
    tau_mu: float = 1.0,
    tau_sigma: float | list[float] | tuple[float, ...] = 1.0,
    mu0: float = 0.0,
    sample_mu0: bool = False,
    inv_gamma_a: float = 2.0,
    inv_gamma_b: float = 1.0,
    omega: np.ndarray | list[list[float]] | None = None,
    kernel: KernelSpec | KernelConfig | None = None,
    scale_by_features: bool = False,
    centered: bool = False,
) -> PriorSpec:
    if kind not in PRIOR_KINDS:
        raise InputValidationError(f"unknown prior kind: {kind}", {"kinds": list(PRIOR_KINDS)})
    if not tau_mu > 0:
        raise InputValidationError("tau_mu must be positive", {"tau_mu": tau_mu})
    if sample_mu0 and not math.isfinite(tau_mu):
        raise InputValidationError("sampling mu0 needs a finite tau_mu")
    scales = tuple(float(v) for v in (tau_sigma if isinstance(tau_sigma, (list, tuple)) else [tau_sigma]))
    if not scales or any(not (v > 0 and math.isfinite(v)) for v in scales):
        raise InputValidationError("tau_sigma must be positive and finite", {"tau_sigma": list(scales)})
    if inv_gamma_a <= 0 or inv_gamma_b <= 0:
        raise InputValidationError("inverse-gamma shape and scale must be positive")

    corr = None
    if omega is not None:
        if kind != "correlated":
            raise InputValidationError("omega only applies to the correlated prior")
        corr = _checked_correlation(np.asarray(omega, dtype=float))

    spec_kernel = None
    if kind == "gp":
        if isinstance(kernel, KernelConfig):
            spec_kernel = KernelSpec(**kernel.model_dump())
        else:
            spec_kernel = kernel or KernelSpec()
        if spec_kernel.kind not in {"exp_quad", "zero_one"}:
            raise InputValidationError(f"unknown kernel kind: {spec_kernel.kind}")
        if spec_kernel.rho_shape <= 0 or spec_kernel.rho_scale <= 0 or spec_kernel.jitter <= 0:
            raise InputValidationError("kernel hyperparameters must be positive")

    return PriorSpec(
        kind=kind,
        tau_mu=float(tau_mu),
        tau_sigma=scales,
        mu0=float(mu0),
        sample_mu0=bool(sample_mu0),
        inv_gamma_a=float(inv_gamma_a),
        inv_gamma_b=float(inv_gamma_b),
        omega=corr,
        kernel=spec_kernel,
        scale_by_features=bool(scale_by_features),
        centered=bool(centered),
    )


def prior_from_config(cfg: PriorConfig) -> PriorSpec:
    return build_prior(
        cfg.kind,
        tau_mu=cfg.tau_mu,
        tau_sigma=cfg.tau_sigma,
        mu0=cfg.mu0,
        sample_mu0=cfg.sample_mu0,
        inv_gamma_a=cfg.inv_gamma_a,
        inv_gamma_b=cfg.inv_gamma_b,
        omega=cfg.omega,
        kernel=cfg.kernel,
        scale_by_features=cfg.scale_by_features,
        centered=cfg.centered,
    )


def prior_to_config(prior: PriorSpec) -> PriorConfig:
    return PriorConfig(
        kind=prior.kind,  # type: ignore[arg-type]
        tau_mu=prior.tau_mu,
        tau_sigma=list(prior.tau_sigma) if len(prior.tau_sigma) > 1 else prior.tau_sigma[0],
        mu0=prior.mu0,
        sample_mu0=prior.sample_mu0,
        inv_gamma_a=prior.inv_gamma_a,
        inv_gamma_b=prior.inv_gamma_b,
        omega=None if prior.omega is None else prior.omega.tolist(),
        kernel=None if prior.kernel is None else KernelConfig(**prior.kernel.__dict__),
        scale_by_features=prior.scale_by_features,
        centered=prior.centered,
    )


def _checked_correlation(omega: np.ndarray) -> np.ndarray:
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise InputValidationError("omega must be a square matrix", {"shape": list(omega.shape)})
    if not np.all(np.isfinite(omega)):
        raise InputValidationError("omega has non-finite entries")
    if np.max(np.abs(omega - omega.T)) > 1e-8:
        raise InputValidationError("omega must be symmetric")
    if np.max(np.abs(np.diag(omega) - 1.0)) > 1e-8:
        raise InputValidationError("omega must have a unit diagonal")
    smallest = float(np.linalg.eigvalsh(omega).min())
    if smallest <= 0:
        raise InputValidationError(
            f"omega is not positive definite: smallest eigenvalue {smallest:.3g}",
            {"smallest_eigenvalue": smallest},
        )
    return omega


def effective_tau_sigma(prior: PriorSpec, n_groups: int, n_columns: int) -> np.ndarray:
    """Per-group half-normal scales after broadcasting and optional feature-count scaling."""
    scales = np.asarray(prior.tau_sigma, dtype=float)
    if scales.size == 1:
        scales = np.full(max(n_groups, 1), scales[0])
    elif scales.size != n_groups:
        raise InputValidationError(
            "tau_sigma needs one entry per group",
            {"groups": n_groups, "tau_sigma": scales.tolist()},
        )
    if prior.scale_by_features and n_columns > 0:
        scales = scales * math.sqrt(1.0 / n_columns)
    return scales


def normal_logpdf(x: np.ndarray, loc: float | np.ndarray, scale: float | np.ndarray) -> tuple[float, np.ndarray]:
    z = (x - loc) / scale
    value = float(np.sum(-0.5 * z**2 - np.log(scale) - 0.5 * LOG_2PI))
    return value, -z / scale


def half_normal_on_log(log_s: np.ndarray, scale: float | np.ndarray, *, jacobian: bool = True) -> tuple[float, np.ndarray]:
    """Half-normal density of s = exp(log_s), differentiated in log_s."""
    s = np.exp(log_s)
    ratio = (s / scale) ** 2
    value = np.sum(LOG_2 - np.log(scale) - 0.5 * LOG_2PI - 0.5 * ratio)
    grad = -ratio
    if jacobian:
        value = value + np.sum(log_s)
        grad = grad + 1.0
    return float(value), grad


def inv_gamma_on_log(log_x: np.ndarray, a: float, b: float, *, jacobian: bool = True) -> tuple[float, np.ndarray]:
    x = np.exp(log_x)
    value = np.sum(a * math.log(b) - gammaln(a) - (a + 1.0) * log_x - b / x)
    grad = -(a + 1.0) + b / x
    if jacobian:
        value = value + np.sum(log_x)
        grad = grad + 1.0
    return float(value), grad
