from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from app.config import settings
from app.schemas import FitOptions, SamplerConfig
from app.services.core import (
    FeatureSet,
    InputValidationError,
    LpdMatrix,
    UnconstrainedParams,
    design_matrix,
    mixture_log_likelihood,
    softmax_weights,
    validate,
)
from app.services.diagnostics import diagnostics_pass
from app.services.optimize import fit_complete_pooling
from app.services.priors import (
    LOG_2PI,
    PriorSpec,
    effective_tau_sigma,
    half_normal_on_log,
    inv_gamma_on_log,
    normal_logpdf,
)
from app.services.sampler import SamplerError, sample

logger = logging.getLogger(__name__)

UNSEEN_POLICIES = ("error", "hierarchical_mean")


class DiagnosticsError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None):
        super().__init__(message)
        self.message = message
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TimeWeights:
    pi: np.ndarray
    gamma: float
    T: float

    @property
    def multiplier(self) -> np.ndarray:
        return self.pi.size * self.pi / self.pi.sum()


def time_reweight(t: np.ndarray, T: float, gamma: float) -> TimeWeights:
    """Likelihood weights 1 + gamma - (1 - t/T)^2 favouring recent observations."""
    t = np.asarray(t, dtype=float)
    if not (gamma > 0 and T > 0):
        raise InputValidationError("time reweighting needs gamma > 0 and T > 0", {"gamma": gamma, "T": T})
    outside = np.flatnonzero((t < 0) | (t > T) | ~np.isfinite(t))
    if outside.size:
        raise InputValidationError(
            f"times must lie in [0, {T}]",
            {"indices": [int(i) for i in outside[:20]]},
        )
    return TimeWeights(pi=1.0 + gamma - (1.0 - t / T) ** 2, gamma=float(gamma), T=float(T))


@dataclass(frozen=True)
class ParamLayout:
    blocks: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return int(sum(int(np.prod(shape)) for _, shape in self.blocks))

    def slices(self) -> dict[str, slice]:
        out: dict[str, slice] = {}
        start = 0
        for name, shape in self.blocks:
            stop = start + int(np.prod(shape))
            out[name] = slice(start, stop)
            start = stop
        return out

    def unpack(self, theta: np.ndarray) -> UnconstrainedParams:
        theta = np.asarray(theta, dtype=float)
        parts: dict[str, np.ndarray] = {}
        for (name, shape), piece in zip(self.blocks, self.slices().values()):
            parts[name] = theta[piece].reshape(shape)
        return UnconstrainedParams(
            alpha=parts.pop("alpha"),
            mu=parts.pop("mu"),
            log_sigma=parts.pop("log_sigma"),
            extra=parts,
        )

    def pack(self, params: UnconstrainedParams) -> np.ndarray:
        source = {"alpha": params.alpha, "mu": params.mu, "log_sigma": params.log_sigma, **params.extra}
        return np.concatenate([np.asarray(source[name], dtype=float).ravel() for name, _ in self.blocks])

    def zeros(self) -> UnconstrainedParams:
        return self.unpack(np.zeros(self.size))

    def names(self) -> list[str]:
        out: list[str] = []
        for name, shape in self.blocks:
            for index in np.ndindex(*shape):
                out.append(f"{name}[{','.join(str(i) for i in index)}]")
        return out


@dataclass(frozen=True)
class HierModel:
    prior: PriorSpec
    K: int
    layout: ParamLayout
    shifted: np.ndarray
    offsets: np.ndarray
    row_weights: np.ndarray | None
    X: np.ndarray
    groups: np.ndarray
    n_groups: int
    n_cell_cols: int
    tau_sigma: np.ndarray
    cell_labels: tuple[str, ...] = ()
    cell_index: np.ndarray | None = None
    medians: np.ndarray | None = None
    scales: np.ndarray | None = None
    unseen_cells: str = "hierarchical_mean"
    corr_chol: np.ndarray | None = None
    corr_inv: np.ndarray | None = None
    corr_logdet: float = 0.0
    gp_inputs: np.ndarray | None = None
    gp_index: np.ndarray | None = None
    gp_uses_cells: bool = False

    @property
    def n(self) -> int:
        return int(self.shifted.shape[0])


def build_model(
    lpd: LpdMatrix,
    feats: FeatureSet | None,
    prior: PriorSpec,
    tw: TimeWeights | None = None,
    *,
    unseen_cells: str = "hierarchical_mean",
) -> HierModel:
    if unseen_cells not in UNSEEN_POLICIES:
        raise InputValidationError(f"unknown unseen-cell policy: {unseen_cells}")
    lpd, feats = validate(lpd, feats, allow_empty=True)
    n, K = lpd.n, lpd.K
    Km1 = K - 1
    offsets = lpd.values.max(axis=1) if n else np.zeros(0)
    shifted = lpd.values - offsets[:, None] if n else np.zeros((0, K))
    row_weights = None
    if tw is not None:
        if tw.pi.size != n:
            raise InputValidationError("time weights do not match observations", {"n": n, "weights": int(tw.pi.size)})
        row_weights = tw.multiplier

    X, groups, n_cell_cols = design_matrix(feats, n)
    M = X.shape[1]
    n_groups = int(groups.max()) + 1 if groups.size else 1
    if prior.kind != "grouped":
        n_groups = 1
    tau_sigma = effective_tau_sigma(prior, n_groups, M)

    blocks: list[tuple[str, tuple[int, ...]]] = []
    extra: dict[str, Any] = {}
    if prior.kind == "gp":
        if feats is not None and feats.n_features:
            inputs = np.asarray(feats.features, dtype=float)
            uses_cells = False
        elif feats is not None and feats.cell_index is not None:
            inputs = np.asarray(feats.cell_index, dtype=float).reshape(-1, 1)
            uses_cells = True
        else:
            raise InputValidationError("the gp prior needs features or a cell index")
        assert prior.kernel is not None
        if uses_cells and prior.kernel.kind != "zero_one":
            # cell codes are nominal; a distance kernel would order them by label
            raise InputValidationError(
                "the exp_quad kernel needs continuous features; use the zero_one kernel for cells",
                {"kernel": prior.kernel.kind},
            )
        unique, index = np.unique(inputs, axis=0, return_inverse=True)
        extra.update(gp_inputs=unique, gp_index=index.ravel(), gp_uses_cells=uses_cells)
        blocks.append(("alpha", (unique.shape[0], Km1)))
        blocks.append(("mu", (Km1,)))
        blocks.append(("log_sigma", (Km1,)))
        if prior.kernel.kind == "exp_quad":
            blocks.append(("log_rho", (Km1,)))
    else:
        if M == 0 and n > 0:
            logger.info("no design columns; hierarchical model reduces to complete pooling")
        blocks.append(("alpha", (M, Km1)))
        blocks.append(("mu", (Km1,)))
        blocks.append(("log_sigma", (n_groups, Km1) if prior.kind == "grouped" else (Km1,)))
        if prior.kind == "feature_decomposed":
            blocks.append(("log_lambda", (M,)))
        if prior.kind == "correlated":
            if n_cell_cols == 0:
                raise InputValidationError("the correlated prior needs a cell index")
            omega = np.eye(n_cell_cols) if prior.omega is None else prior.omega
            if omega.shape != (n_cell_cols, n_cell_cols):
                raise InputValidationError(
                    "omega dimension does not match the number of cells",
                    {"omega": list(omega.shape), "cells": n_cell_cols},
                )
            full = np.eye(M)
            full[:n_cell_cols, :n_cell_cols] = omega
            chol = cholesky(full, lower=True)
            extra.update(
                corr_chol=chol,
                corr_inv=cho_solve((chol, True), np.eye(M)),
                corr_logdet=float(2.0 * np.log(np.diag(chol)).sum()),
            )
    if prior.sample_mu0:
        blocks.append(("mu0", (1,)))

    return HierModel(
        prior=prior,
        K=K,
        layout=ParamLayout(tuple(blocks)),
        shifted=shifted,
        offsets=offsets,
        row_weights=row_weights,
        X=X,
        groups=groups,
        n_groups=n_groups,
        n_cell_cols=n_cell_cols,
        tau_sigma=tau_sigma,
        cell_labels=feats.cell_labels if feats is not None else (),
        cell_index=None if feats is None else feats.cell_index,
        medians=None if feats is None else feats.medians,
        scales=None if feats is None else feats.scales,
        unseen_cells=unseen_cells,
        **extra,
    )


def _intercept(model: HierModel, p: UnconstrainedParams) -> np.ndarray:
    if model.prior.sample_mu0:
        return p.mu + model.prior.tau_mu * p.extra["mu0"][0]
    return p.mu


def _coefficient_scales(model: HierModel, p: UnconstrainedParams) -> np.ndarray:
    sigma = np.exp(p.log_sigma)
    kind = model.prior.kind
    M = model.X.shape[1]
    if kind == "grouped":
        return sigma[model.groups, :]
    if kind == "feature_decomposed":
        return np.exp(p.extra["log_lambda"])[:, None] * sigma[None, :]
    return np.broadcast_to(sigma[None, :], (M, sigma.size))


def _coefficients(model: HierModel, p: UnconstrainedParams) -> np.ndarray:
    if model.prior.centered:
        return p.alpha
    scale = _coefficient_scales(model, p)
    if model.prior.kind == "correlated":
        return scale * (model.corr_chol @ p.alpha)
    return scale * p.alpha


def _gp_kernel(model: HierModel, inputs_a: np.ndarray, inputs_b: np.ndarray, sigma: float, log_rho: float | None) -> tuple[np.ndarray, np.ndarray]:
    """Kernel block and squared distances between two input sets."""
    sqdist = ((inputs_a[:, None, :] - inputs_b[None, :, :]) ** 2).sum(axis=-1)
    assert model.prior.kernel is not None
    if model.prior.kernel.kind == "zero_one":
        return sigma**2 * (sqdist == 0).astype(float), sqdist
    rho = math.exp(log_rho if log_rho is not None else 0.0)
    return sigma**2 * np.exp(-sqdist / rho**2), sqdist


def _gp_factor(model: HierModel, p: UnconstrainedParams, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    inputs = model.gp_inputs
    assert inputs is not None and model.prior.kernel is not None
    sigma = float(np.exp(p.log_sigma[k]))
    log_rho = float(p.extra["log_rho"][k]) if "log_rho" in p.extra else None
    kmat, sqdist = _gp_kernel(model, inputs, inputs, sigma, log_rho)
    chol = cholesky(kmat + model.prior.kernel.jitter * np.eye(inputs.shape[0]), lower=True)
    return kmat, sqdist, chol


def _gp_latents(model: HierModel, p: UnconstrainedParams) -> np.ndarray:
    if model.prior.centered:
        return p.alpha
    latents = np.empty_like(p.alpha)
    for k in range(model.K - 1):
        _, _, chol = _gp_factor(model, p, k)
        latents[:, k] = chol @ p.alpha[:, k]
    return latents


def linear_predictor(model: HierModel, p: UnconstrainedParams) -> np.ndarray:
    """Unconstrained weights eta (n x K-1) at the training inputs."""
    intercept = _intercept(model, p)
    if model.prior.kind == "gp":
        assert model.gp_index is not None
        return intercept + _gp_latents(model, p)[model.gp_index]
    return intercept + model.X @ _coefficients(model, p)


def _gp_terms(model: HierModel, p: UnconstrainedParams, grad_eta: np.ndarray, g: UnconstrainedParams) -> float:
    value = 0.0
    kernel = model.prior.kernel
    assert kernel is not None and model.gp_index is not None
    n_inputs = p.alpha.shape[0]
    for k in range(model.K - 1):
        kmat, sqdist, chol = _gp_factor(model, p, k)
        rho = math.exp(p.extra["log_rho"][k]) if "log_rho" in p.extra else None
        d_kernel = [("log_sigma", 2.0 * kmat)]
        if rho is not None:
            d_kernel.append(("log_rho", kmat * (2.0 * sqdist / rho**2)))
        g_latent = np.bincount(model.gp_index, weights=grad_eta[:, k], minlength=n_inputs)

        if model.prior.centered:
            f = p.alpha[:, k]
            solved = cho_solve((chol, True), f)
            value += -0.5 * float(f @ solved) - float(np.log(np.diag(chol)).sum()) - 0.5 * n_inputs * LOG_2PI
            g.alpha[:, k] += g_latent - solved
            k_inv = cho_solve((chol, True), np.eye(n_inputs))
            for name, dk in d_kernel:
                contribution = 0.5 * (float(solved @ dk @ solved) - float(np.sum(k_inv * dk)))
                _add(g, name, k, contribution)
        else:
            z = p.alpha[:, k]
            value += -0.5 * float(z @ z) - 0.5 * n_inputs * LOG_2PI
            pulled = chol.T @ g_latent
            g.alpha[:, k] += pulled - z
            for name, dk in d_kernel:
                inner = solve_triangular(chol, dk, lower=True)
                a = solve_triangular(chol, inner.T, lower=True)
                phi = np.tril(a)
                phi[np.diag_indices_from(phi)] *= 0.5
                _add(g, name, k, float(pulled @ phi @ z))
    return value


def _add(g: UnconstrainedParams, name: str, k: int, amount: float) -> None:
    if name == "log_sigma":
        g.log_sigma[k] += amount
    else:
        g.extra[name][k] += amount


def _coefficient_terms(model: HierModel, p: UnconstrainedParams, grad_eta: np.ndarray, g: UnconstrainedParams) -> float:
    kind = model.prior.kind
    B = model.X.T @ grad_eta
    scale = _coefficient_scales(model, p)

    if kind == "correlated":
        sigma = np.exp(p.log_sigma)
        M = model.X.shape[1]
        if model.prior.centered:
            beta = p.alpha
            solved = model.corr_inv @ beta
            quad = np.sum(beta * solved, axis=0)
            value = float(np.sum(-0.5 * quad / sigma**2 - M * p.log_sigma) - (model.K - 1) * 0.5 * (model.corr_logdet + M * LOG_2PI))
            g.alpha += B - solved / sigma**2
            g.log_sigma += quad / sigma**2 - M
            return value
        tau = p.alpha
        beta = sigma[None, :] * (model.corr_chol @ tau)
        g.alpha += model.corr_chol.T @ (sigma[None, :] * B) - tau
        g.log_sigma += np.sum(beta * B, axis=0)
        return float(np.sum(-0.5 * tau**2) - 0.5 * tau.size * LOG_2PI)

    if model.prior.centered:
        beta = p.alpha
        z = beta / scale
        value = float(np.sum(-0.5 * z**2 - np.log(scale)) - 0.5 * beta.size * LOG_2PI)
        g.alpha += B - beta / scale**2
        d_log_scale = z**2 - 1.0
    else:
        tau = p.alpha
        beta = scale * tau
        value = float(np.sum(-0.5 * tau**2) - 0.5 * tau.size * LOG_2PI)
        g.alpha += scale * B - tau
        d_log_scale = beta * B

    if kind == "grouped":
        np.add.at(g.log_sigma, model.groups, d_log_scale)
    else:
        g.log_sigma += d_log_scale.sum(axis=0)
    if kind == "feature_decomposed":
        g.extra["log_lambda"] += d_log_scale.sum(axis=1)
    return value


def _evaluate(model: HierModel, p: UnconstrainedParams, *, jacobian: bool = True) -> tuple[float, UnconstrainedParams]:
    prior = model.prior
    g = UnconstrainedParams(
        alpha=np.zeros_like(p.alpha),
        mu=np.zeros_like(p.mu),
        log_sigma=np.zeros_like(p.log_sigma),
        extra={key: np.zeros_like(value) for key, value in p.extra.items()},
    )
    eta = linear_predictor(model, p)
    loglik, grad_eta = mixture_log_likelihood(model.shifted, eta, model.row_weights)
    shift = model.offsets.sum() if model.row_weights is None else float(np.dot(model.row_weights, model.offsets))
    value = loglik + float(shift)

    d_intercept = grad_eta.sum(axis=0)
    g.mu += d_intercept
    if prior.sample_mu0:
        g.extra["mu0"] += prior.tau_mu * d_intercept.sum() - p.extra["mu0"]
        value += -0.5 * float(p.extra["mu0"][0] ** 2) - 0.5 * LOG_2PI

    if prior.kind == "gp":
        value += _gp_terms(model, p, grad_eta, g)
    else:
        value += _coefficient_terms(model, p, grad_eta, g)

    if math.isfinite(prior.tau_mu):
        term, grad = normal_logpdf(p.mu, prior.mu0, prior.tau_mu)
        value += term
        g.mu += grad

    tau_sigma = model.tau_sigma[:, None] if prior.kind == "grouped" else model.tau_sigma[0]
    term, grad = half_normal_on_log(p.log_sigma, tau_sigma, jacobian=jacobian)
    value += term
    g.log_sigma += grad

    if "log_lambda" in p.extra:
        term, grad = inv_gamma_on_log(p.extra["log_lambda"], prior.inv_gamma_a, prior.inv_gamma_b, jacobian=jacobian)
        value += term
        g.extra["log_lambda"] += grad
    if "log_rho" in p.extra:
        assert prior.kernel is not None
        term, grad = inv_gamma_on_log(p.extra["log_rho"], prior.kernel.rho_shape, prior.kernel.rho_scale, jacobian=jacobian)
        value += term
        g.extra["log_rho"] += grad
    return value, g


def log_posterior(
    params: UnconstrainedParams,
    lpd: LpdMatrix,
    feats: FeatureSet | None,
    prior: PriorSpec,
    tw: TimeWeights | None = None,
    *,
    jacobian: bool = True,
) -> float:
    model = build_model(lpd, feats, prior, tw)
    return _evaluate(model, params, jacobian=jacobian)[0]


def grad_log_posterior(
    params: UnconstrainedParams,
    lpd: LpdMatrix,
    feats: FeatureSet | None,
    prior: PriorSpec,
    tw: TimeWeights | None = None,
    *,
    jacobian: bool = True,
) -> UnconstrainedParams:
    model = build_model(lpd, feats, prior, tw)
    return _evaluate(model, params, jacobian=jacobian)[1]


def value_and_grad(model: HierModel, theta: np.ndarray, *, jacobian: bool = True) -> tuple[float, np.ndarray]:
    value, grad = _evaluate(model, model.layout.unpack(theta), jacobian=jacobian)
    return value, model.layout.pack(grad)


def initial_point(model: HierModel) -> np.ndarray:
    params = model.layout.zeros()
    if model.n and model.K > 1:
        pooled = fit_complete_pooling(
            LpdMatrix(values=model.shifted),
            FitOptions(max_iters=2000, tol=1e-8),
        ).weights
        logits = np.log(np.maximum(pooled[:-1], 1e-12)) - math.log(max(pooled[-1], 1e-12))
        params.mu = np.clip(logits, -5.0, 5.0)
    return model.layout.pack(params)


@dataclass
class WeightDraws:
    model: HierModel
    theta: np.ndarray
    chain_ids: np.ndarray
    pointwise: np.ndarray
    param_names: list[str]
    diagnostics: dict[str, Any] = field(default_factory=dict)
    cell_weights: np.ndarray | None = None
    cell_eta: np.ndarray | None = None

    @property
    def S(self) -> int:
        return int(self.theta.shape[0])

    @property
    def mean_weights(self) -> np.ndarray:
        return self.pointwise.mean(axis=0)

    def params(self, s: int) -> UnconstrainedParams:
        return self.model.layout.unpack(self.theta[s])


def _cells_only(model: HierModel) -> bool:
    if model.prior.kind == "gp":
        return model.gp_uses_cells
    return model.n_cell_cols > 0 and model.X.shape[1] == model.n_cell_cols


def draws_from_theta(
    model: HierModel,
    theta: np.ndarray,
    chain_ids: np.ndarray | None = None,
    diagnostics: dict[str, Any] | None = None,
) -> WeightDraws:
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if theta.shape[1] != model.layout.size:
        raise InputValidationError(
            "draw table does not match the model parameters",
            {"expected": model.layout.size, "got": int(theta.shape[1])},
        )
    etas = np.stack([linear_predictor(model, model.layout.unpack(row)) for row in theta]) if model.n else np.zeros((theta.shape[0], 0, model.K - 1))
    pointwise = softmax_weights(etas)

    cell_weights = cell_eta = None
    if _cells_only(model) and model.cell_index is not None and model.n:
        first = np.array([int(np.flatnonzero(model.cell_index == j)[0]) for j in range(len(model.cell_labels))])
        cell_weights = pointwise[:, first, :].mean(axis=0)
        cell_eta = etas[:, first, :].mean(axis=0)

    return WeightDraws(
        model=model,
        theta=theta,
        chain_ids=np.zeros(theta.shape[0], dtype=int) if chain_ids is None else np.asarray(chain_ids),
        pointwise=pointwise,
        param_names=model.layout.names(),
        diagnostics=diagnostics or {},
        cell_weights=cell_weights,
        cell_eta=cell_eta,
    )


def fit_hierarchical(
    lpd: LpdMatrix,
    feats: FeatureSet | None,
    prior: PriorSpec,
    sampler_cfg: SamplerConfig | None = None,
    tw: TimeWeights | None = None,
    *,
    check_diagnostics: bool = True,
    threads: int | None = None,
    unseen_cells: str = "hierarchical_mean",
) -> WeightDraws:
    cfg = sampler_cfg or SamplerConfig()
    model = build_model(lpd, feats, prior, tw, unseen_cells=unseen_cells)
    start = initial_point(model)
    jitter_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(cfg.chains + 1)[-1])
    inits = start + jitter_rng.uniform(-0.5, 0.5, size=(cfg.chains, start.size))

    value, grad = value_and_grad(model, start)
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        raise SamplerError("log posterior or its gradient is not finite at the initial point", reason="init")

    def _logp(theta: np.ndarray) -> tuple[float, np.ndarray]:
        return value_and_grad(model, theta)

    result = sample(_logp, inits, cfg, threads=threads, param_names=model.layout.names())
    diag = result.diagnostics
    diag["step_size"] = result.step_sizes
    if diag["divergent_fraction"] > settings.max_divergent_fraction:
        raise SamplerError(
            f"{diag['divergent_fraction']:.1%} of transitions diverged; "
            f"raise target_accept above {cfg.target_accept} or lengthen warmup beyond {cfg.warmup}",
            reason="divergences",
        )
    passed = diagnostics_pass(diag, rhat_max=settings.rhat_max, ess_min=settings.ess_min)
    diag["passed"] = passed
    if not passed:
        if diag["rhat_available"]:
            worst = int(np.argmax(np.where(np.isnan(diag["rhat"]), np.inf, diag["rhat"])))
        else:
            worst = int(np.argmin(np.where(np.isnan(diag["ess_bulk"]), -np.inf, diag["ess_bulk"])))
        message = (
            f"convergence diagnostics failed (R-hat < {settings.rhat_max}, bulk ESS > {settings.ess_min}); "
            f"worst parameter {model.layout.names()[worst]}"
        )
        if check_diagnostics:
            raise DiagnosticsError(message, diag)
        logger.warning("%s; continuing because diagnostics checks are disabled", message)

    chain_ids = np.repeat(np.arange(cfg.chains), cfg.draws_per_chain)
    return draws_from_theta(model, result.flat_draws(), chain_ids, diag)


def _prediction_design(model: HierModel, new_feats: FeatureSet) -> tuple[np.ndarray, np.ndarray | None]:
    """Design rows for new inputs plus the training cell code of every row (-1 when unseen)."""
    n_new = new_feats.n
    codes = None
    if model.n_cell_cols or (model.prior.kind == "gp" and model.gp_uses_cells):
        if new_feats.cell_index is None:
            raise InputValidationError("the model was trained with cells; new inputs need a cell index")
        raw = np.asarray(new_feats.cell_index)
        labels = [new_feats.cell_labels[c] for c in raw] if new_feats.cell_labels else [str(c) for c in raw]
        lookup = {label: j for j, label in enumerate(model.cell_labels)}
        codes = np.array([lookup.get(label, -1) for label in labels], dtype=int)
        unseen = sorted({labels[i] for i in np.flatnonzero(codes < 0)})
        if unseen and model.unseen_cells == "error":
            raise InputValidationError(f"cells unseen in training: {unseen}", {"cells": unseen})

    if model.medians is not None and new_feats.medians is not None:
        if not np.allclose(model.medians, new_feats.medians):
            raise InputValidationError("new features were rectified with different medians than the training data")
    if model.scales is not None and new_feats.scales is not None:
        if not np.allclose(model.scales, new_feats.scales):
            raise InputValidationError("new features were standardized with different scales than the training data")

    blocks = []
    if model.n_cell_cols:
        onehot = np.zeros((n_new, model.n_cell_cols))
        seen = np.flatnonzero(codes >= 0)
        onehot[seen, codes[seen]] = 1.0
        blocks.append(onehot)
    n_continuous = model.X.shape[1] - model.n_cell_cols
    if model.prior.kind != "gp" and n_continuous:
        if new_feats.features is None or new_feats.n_features != n_continuous:
            raise InputValidationError("new features do not match the training feature columns")
        blocks.append(np.asarray(new_feats.features, dtype=float))
    design = np.hstack(blocks) if blocks else np.zeros((n_new, 0))
    return design, codes


def _predict_eta(model: HierModel, p: UnconstrainedParams, design: np.ndarray, new_inputs: np.ndarray | None) -> np.ndarray:
    intercept = _intercept(model, p)
    if model.prior.kind != "gp":
        return intercept + design @ _coefficients(model, p)
    assert model.gp_inputs is not None and model.prior.kernel is not None and new_inputs is not None
    eta = np.empty((new_inputs.shape[0], model.K - 1))
    for k in range(model.K - 1):
        sigma = float(np.exp(p.log_sigma[k]))
        log_rho = float(p.extra["log_rho"][k]) if "log_rho" in p.extra else None
        cross, _ = _gp_kernel(model, new_inputs, model.gp_inputs, sigma, log_rho)
        _, _, chol = _gp_factor(model, p, k)
        if model.prior.centered:
            latent = cross @ cho_solve((chol, True), p.alpha[:, k])
        else:
            latent = cross @ solve_triangular(chol.T, p.alpha[:, k], lower=False)
        eta[:, k] = intercept[k] + latent
    return eta


def predict_weights(draws: WeightDraws, new_feats: FeatureSet) -> np.ndarray:
    """Posterior mean of the pointwise weights at new inputs (n_new x K)."""
    model = draws.model
    design, codes = _prediction_design(model, new_feats)
    new_inputs = None
    if model.prior.kind == "gp":
        if model.gp_uses_cells:
            assert codes is not None
            new_inputs = codes.astype(float).reshape(-1, 1)
        else:
            if new_feats.features is None:
                raise InputValidationError("the gp model needs features for new inputs")
            new_inputs = np.asarray(new_feats.features, dtype=float)
    unseen = np.zeros(new_feats.n, dtype=bool) if codes is None else codes < 0
    total = np.zeros((new_feats.n, model.K))
    for s in range(draws.S):
        params = draws.params(s)
        eta = _predict_eta(model, params, design, new_inputs)
        if model.prior.kind == "gp" and model.gp_uses_cells:
            eta[unseen] = _intercept(model, params)
        total += softmax_weights(eta)
    return total / draws.S


def combine_predictions(weights: np.ndarray, model_log_densities: np.ndarray) -> float:
    """log sum_k w_k exp(ld_k); models with zero weight do not contribute."""
    w = np.asarray(weights, dtype=float)
    ld = np.asarray(model_log_densities, dtype=float)
    active = w > 0
    if not np.any(active):
        raise InputValidationError("weights must have positive mass")
    top = float(ld[active].max())
    return top + math.log(float(np.sum(w[active] * np.exp(ld[active] - top))))


def pointwise_differences(lpd: LpdMatrix, feats: FeatureSet | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Exploratory log density differences against the last model, with per-cell means."""
    lpd, feats = validate(lpd, feats)
    delta = lpd.values[:, :-1] - lpd.values[:, -1:]
    if feats is None or feats.cell_index is None:
        return delta, None
    n_cells = len(feats.cell_labels)
    means = np.vstack([delta[feats.cell_index == j].mean(axis=0) for j in range(n_cells)])
    return delta, means


@dataclass
class MapFit:
    model: HierModel
    theta: np.ndarray
    weights: np.ndarray
    objective: float
    converged: bool
    grad_norm: float
    cell_weights: np.ndarray | None = None

    @property
    def params(self) -> UnconstrainedParams:
        return self.model.layout.unpack(self.theta)


def _newton_polish(fun, x: np.ndarray, steps: int = 8) -> np.ndarray:  # type: ignore[no-untyped-def]
    h = 1e-6
    for _ in range(steps):
        value, grad = fun(x)
        if np.linalg.norm(grad) < 1e-10:
            break
        hess = np.empty((x.size, x.size))
        for i in range(x.size):
            step = np.zeros(x.size)
            step[i] = h
            hess[:, i] = (fun(x + step)[1] - fun(x - step)[1]) / (2 * h)
        hess = 0.5 * (hess + hess.T)
        try:
            direction = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            break
        candidate = x + direction
        cand_value, cand_grad = fun(candidate)
        if cand_value <= value + 1e-12 or np.linalg.norm(cand_grad) < np.linalg.norm(grad):
            x = candidate
        else:
            break
    return x


def fit_map(
    lpd: LpdMatrix,
    feats: FeatureSet | None,
    prior: PriorSpec,
    *,
    fixed_sigma: float | None = None,
    flat_mu: bool = True,
    tw: TimeWeights | None = None,
    max_iters: int = 20000,
) -> MapFit:
    """Posterior mode over coefficients and mu, with sigma optionally held fixed.

    Small fixed scales use the non-centered form and large ones the centered form so the
    problem stays well scaled. The mode is taken without Jacobian terms.
    """
    centered = prior.centered if fixed_sigma is None else fixed_sigma >= 1.0
    map_prior = replace(
        prior,
        centered=centered,
        tau_mu=math.inf if flat_mu else prior.tau_mu,
        sample_mu0=False if flat_mu else prior.sample_mu0,
    )
    model = build_model(lpd, feats, map_prior, tw)
    theta0 = initial_point(model)
    free = np.ones(model.layout.size, dtype=bool)
    if fixed_sigma is not None:
        if not fixed_sigma > 0:
            raise InputValidationError("fixed_sigma must be positive")
        block = model.layout.slices()["log_sigma"]
        theta0[block] = math.log(fixed_sigma)
        free[block] = False

    def _negative(x: np.ndarray) -> tuple[float, np.ndarray]:
        theta = theta0.copy()
        theta[free] = x
        value, grad = value_and_grad(model, theta, jacobian=False)
        return -value, -grad[free]

    result = minimize(
        _negative,
        theta0[free],
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iters, "ftol": 1e-15, "gtol": 1e-10, "maxcor": 30},
    )
    x = result.x
    if x.size <= 200:
        x = _newton_polish(_negative, x)
    theta = theta0.copy()
    theta[free] = x
    value, grad = _negative(x)
    grad_norm = float(np.linalg.norm(grad))
    if not result.success:
        logger.warning("map optimization stopped early: %s grad_norm=%.3g", result.message, grad_norm)

    params = model.layout.unpack(theta)
    weights = softmax_weights(linear_predictor(model, params)) if model.n else np.zeros((0, model.K))
    cell_weights = None
    if _cells_only(model) and model.cell_index is not None and model.n:
        cell_weights = np.vstack([weights[np.flatnonzero(model.cell_index == j)[0]] for j in range(len(model.cell_labels))])
    return MapFit(
        model=model,
        theta=theta,
        weights=weights,
        objective=-float(value),
        converged=bool(result.success) or grad_norm < 1e-6,
        grad_norm=grad_norm,
        cell_weights=cell_weights,
    )
