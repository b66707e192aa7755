from __future__ import annotations

import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from app.config import settings
from app.schemas import SamplerConfig
from app.services.diagnostics import diagnostics

logger = logging.getLogger(__name__)

LogDensity = Callable[[np.ndarray], tuple[float, np.ndarray]]

# dual averaging constants
DA_GAMMA = 0.05
DA_T0 = 10.0
DA_KAPPA = 0.75

WARMUP_SPLIT = (0.15, 0.60, 0.25)


class SamplerError(RuntimeError):
    def __init__(self, message: str, reason: str = "sampler"):
        super().__init__(message)
        self.message = message
        self.reason = reason


@dataclass
class ChainResult:
    draws: np.ndarray
    logp: np.ndarray
    accept_stat: np.ndarray
    divergent: np.ndarray
    n_leapfrog: np.ndarray
    step_size: float
    inv_mass: np.ndarray
    warmup_divergences: int = 0


@dataclass
class SampleResult:
    chains: list[ChainResult]
    param_names: list[str]
    diagnostics: dict = field(default_factory=dict)

    @property
    def draws(self) -> np.ndarray:
        return np.stack([c.draws for c in self.chains])

    @property
    def divergent(self) -> np.ndarray:
        return np.stack([c.divergent for c in self.chains])

    @property
    def accept_stat(self) -> np.ndarray:
        return np.stack([c.accept_stat for c in self.chains])

    @property
    def step_sizes(self) -> list[float]:
        return [c.step_size for c in self.chains]

    def flat_draws(self) -> np.ndarray:
        draws = self.draws
        return draws.reshape(-1, draws.shape[-1])


class DualAveraging:
    def __init__(self, step_size: float, target: float):
        self.mu = math.log(10.0 * step_size)
        self.target = target
        self.h_bar = 0.0
        self.log_step = math.log(step_size)
        self.log_step_bar = 0.0
        self.t = 0

    def update(self, accept_prob: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + DA_T0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob)
        self.log_step = self.mu - math.sqrt(self.t) / DA_GAMMA * self.h_bar
        weight = self.t ** (-DA_KAPPA)
        self.log_step_bar = weight * self.log_step + (1.0 - weight) * self.log_step_bar
        return math.exp(self.log_step)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.log_step_bar) if self.t else math.exp(self.log_step)


def _safe_eval(fn: LogDensity, q: np.ndarray) -> tuple[float, np.ndarray, bool]:
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            logp, grad = fn(q)
    except (np.linalg.LinAlgError, FloatingPointError, ValueError, OverflowError):
        return -math.inf, np.zeros_like(q), False
    grad = np.asarray(grad, dtype=float)
    ok = math.isfinite(logp) and bool(np.all(np.isfinite(grad)))
    return float(logp), grad, ok


def leapfrog(
    fn: LogDensity,
    q: np.ndarray,
    p: np.ndarray,
    grad: np.ndarray,
    step_size: float,
    n_steps: int,
    inv_mass: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray, bool]:
    """Kick-drift-kick integrator; stops early and reports failure on a non-finite density."""
    p = p + 0.5 * step_size * grad
    logp = -math.inf
    for step in range(n_steps):
        q = q + step_size * inv_mass * p
        logp, grad, ok = _safe_eval(fn, q)
        if not ok:
            return q, p, logp, grad, False
        if step < n_steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    return q, p, logp, grad, True


def _kinetic(p: np.ndarray, inv_mass: np.ndarray) -> float:
    return 0.5 * float(np.sum(inv_mass * p * p))


def find_reasonable_step_size(
    fn: LogDensity,
    q: np.ndarray,
    logp: float,
    grad: np.ndarray,
    inv_mass: np.ndarray,
    rng: np.random.Generator,
    step_size: float = 1.0,
) -> float:
    p = rng.standard_normal(q.size) / np.sqrt(inv_mass)
    h0 = -logp + _kinetic(p, inv_mass)

    def _log_ratio(eps: float) -> float:
        _, p1, logp1, _, ok = leapfrog(fn, q, p, grad, eps, 1, inv_mass)
        if not ok:
            return -math.inf
        return h0 - (-logp1 + _kinetic(p1, inv_mass))

    log_ratio = _log_ratio(step_size)
    direction = 1.0 if log_ratio > math.log(0.5) else -1.0
    for _ in range(100):
        if not direction * log_ratio > -direction * math.log(2.0):
            break
        candidate = step_size * 2.0**direction
        if not 1e-10 <= candidate <= 1e3:
            break
        step_size = candidate
        log_ratio = _log_ratio(step_size)
    return step_size


def _transition(
    fn: LogDensity,
    q: np.ndarray,
    logp: float,
    grad: np.ndarray,
    step_size: float,
    inv_mass: np.ndarray,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float, np.ndarray, float, bool, int]:
    p0 = rng.standard_normal(q.size) / np.sqrt(inv_mass)
    n_steps = int(rng.integers(1, cfg.max_leapfrog + 1))
    h0 = -logp + _kinetic(p0, inv_mass)
    q1, p1, logp1, grad1, ok = leapfrog(fn, q, p0, grad, step_size, n_steps, inv_mass)
    energy_error = (-logp1 + _kinetic(p1, inv_mass)) - h0 if ok else math.inf
    if not math.isfinite(energy_error):
        energy_error = math.inf
    divergent = energy_error > cfg.divergence_energy
    accept_prob = 0.0 if divergent else (1.0 if energy_error <= 0 else math.exp(-energy_error))
    if rng.uniform() < accept_prob:
        return q1, logp1, grad1, accept_prob, divergent, n_steps
    return q, logp, grad, accept_prob, divergent, n_steps


def _warmup_windows(warmup: int) -> tuple[int, int]:
    fast_start = int(WARMUP_SPLIT[0] * warmup)
    fast_end = int(WARMUP_SPLIT[2] * warmup)
    return fast_start, warmup - fast_start - fast_end


def _run_chain(
    fn: LogDensity,
    init: np.ndarray,
    cfg: SamplerConfig,
    seed_seq: np.random.SeedSequence,
    chain_id: int,
) -> ChainResult:
    rng = np.random.default_rng(seed_seq)
    q = np.array(init, dtype=float)
    dim = q.size
    logp, grad, ok = _safe_eval(fn, q)
    if not ok:
        raise SamplerError(f"log density is not finite at the initial point of chain {chain_id}", reason="init")

    inv_mass = np.ones(dim)
    step_size = find_reasonable_step_size(fn, q, logp, grad, inv_mass, rng)
    adapter = DualAveraging(step_size, cfg.target_accept)
    first_window, slow_window = _warmup_windows(cfg.warmup)
    window: list[np.ndarray] = []
    warmup_divergences = 0

    for it in range(cfg.warmup):
        q, logp, grad, accept_prob, divergent, _ = _transition(fn, q, logp, grad, step_size, inv_mass, cfg, rng)
        warmup_divergences += int(divergent)
        step_size = adapter.update(accept_prob)
        if first_window <= it < first_window + slow_window:
            window.append(q.copy())
            if it == first_window + slow_window - 1 and len(window) >= 2:
                samples = np.asarray(window)
                count = samples.shape[0]
                variance = samples.var(axis=0, ddof=1)
                inv_mass = (count / (count + 5.0)) * variance + 1e-3 * (5.0 / (count + 5.0))
                step_size = find_reasonable_step_size(fn, q, logp, grad, inv_mass, rng, step_size)
                adapter = DualAveraging(step_size, cfg.target_accept)
    if cfg.warmup and warmup_divergences == cfg.warmup:
        raise SamplerError(f"every warmup transition diverged in chain {chain_id}", reason="warmup")
    step_size = adapter.final_step_size
    if not (math.isfinite(step_size) and step_size > 0):
        raise SamplerError(f"step size adaptation failed in chain {chain_id}", reason="warmup")

    D = cfg.draws_per_chain
    draws = np.empty((D, dim))
    logps = np.empty(D)
    accept = np.empty(D)
    divergent_flags = np.zeros(D, dtype=bool)
    n_leapfrog = np.empty(D, dtype=int)
    for d in range(D):
        q, logp, grad, accept_prob, divergent, n_steps = _transition(fn, q, logp, grad, step_size, inv_mass, cfg, rng)
        draws[d] = q
        logps[d] = logp
        accept[d] = accept_prob
        divergent_flags[d] = divergent
        n_leapfrog[d] = n_steps

    logger.info(
        "chain finished chain=%s step_size=%.4g accept=%.3f divergences=%s",
        chain_id,
        step_size,
        float(accept.mean()) if D else float("nan"),
        int(divergent_flags.sum()),
    )
    return ChainResult(
        draws=draws,
        logp=logps,
        accept_stat=accept,
        divergent=divergent_flags,
        n_leapfrog=n_leapfrog,
        step_size=step_size,
        inv_mass=inv_mass,
        warmup_divergences=warmup_divergences,
    )


def sample(
    fn: LogDensity,
    init: np.ndarray,
    cfg: SamplerConfig | None = None,
    *,
    threads: int | None = None,
    param_names: list[str] | None = None,
) -> SampleResult:
    """Multi-chain HMC with jittered trajectory lengths.

    `fn` returns (log density, gradient). `init` is one point shared by all chains or one row
    per chain. Chains draw from independent streams spawned from `cfg.seed`, so the output
    does not depend on the thread count.
    """
    cfg = cfg or SamplerConfig()
    init = np.asarray(init, dtype=float)
    inits = np.tile(init, (cfg.chains, 1)) if init.ndim == 1 else init
    if inits.shape[0] != cfg.chains:
        raise SamplerError(f"expected {cfg.chains} initial points, got {inits.shape[0]}", reason="init")
    dim = inits.shape[1]
    names = param_names or [f"theta[{i}]" for i in range(dim)]
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)

    workers = max(1, min(cfg.chains, threads or settings.threads))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_chain, fn, inits[c], cfg, seeds[c], c) for c in range(cfg.chains)]
            chains = [f.result() for f in futures]
    else:
        chains = [_run_chain(fn, inits[c], cfg, seeds[c], c) for c in range(cfg.chains)]

    result = SampleResult(chains=chains, param_names=names)
    result.diagnostics = diagnostics(result.draws, result.divergent)
    return result
