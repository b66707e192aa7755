from __future__ import annotations

import math

import numpy as np
from scipy.fft import irfft, next_fast_len, rfft
from scipy.stats import norm, rankdata


def split_chains(x: np.ndarray) -> np.ndarray:
    """(chains, draws) -> (2*chains, draws//2); the middle draw is dropped for odd lengths."""
    x = np.atleast_2d(x)
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def rank_normalize(x: np.ndarray) -> np.ndarray:
    ranks = rankdata(x, method="average").reshape(x.shape)
    return norm.ppf((ranks - 0.375) / (x.size + 0.25))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    size = next_fast_len(2 * n)
    centered = x - x.mean(axis=-1, keepdims=True)
    spectrum = rfft(centered, n=size, axis=-1)
    return irfft(spectrum * np.conj(spectrum), n=size, axis=-1)[..., :n] / n


def rhat_basic(x: np.ndarray) -> float:
    x = np.atleast_2d(x)
    chains, n = x.shape
    if chains < 2 or n < 2:
        return math.nan
    chain_means = x.mean(axis=1)
    within = x.var(axis=1, ddof=1).mean()
    between = n * chain_means.var(ddof=1)
    if within == 0:
        return math.inf if between > 0 else math.nan
    var_plus = (n - 1) / n * within + between / n
    return float(math.sqrt(var_plus / within))


def ess_basic(x: np.ndarray) -> float:
    """Effective sample size with Geyer's initial monotone sequence over all chains."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    chains, n = x.shape
    if n < 4:
        return math.nan
    acov = _autocovariance(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1.0) / n
    if chains > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return math.nan

    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even

    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2

    total = chains * n
    tau = -1.0 + 2.0 * rho[: max_t + 1].sum() + rho[max_t + 1]
    tau = max(tau, 1.0 / math.log10(total))
    return float(total / tau)


def split_rhat(x: np.ndarray) -> float:
    x = np.atleast_2d(x)
    if x.shape[0] < 2:
        return math.nan
    split = split_chains(x)
    bulk = rhat_basic(rank_normalize(split))
    folded = rhat_basic(rank_normalize(np.abs(split - np.median(split))))
    if math.isnan(bulk) or math.isnan(folded):
        return math.nan
    return max(bulk, folded)


def ess_bulk(x: np.ndarray) -> float:
    return ess_basic(rank_normalize(split_chains(x)))


def ess_tail(x: np.ndarray) -> float:
    split = split_chains(x)
    lower, upper = np.quantile(split, [0.05, 0.95])
    values = [ess_basic((split <= lower).astype(float)), ess_basic((split <= upper).astype(float))]
    if any(math.isnan(v) for v in values):
        return math.nan
    return min(values)


def diagnostics(draws: np.ndarray, divergent: np.ndarray | None = None) -> dict:
    """Per-parameter split-R-hat and bulk/tail ESS for draws shaped (chains, draws, params)."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 2:
        draws = draws[:, :, None]
    chains, _, dim = draws.shape
    rhat_available = chains >= 2
    rhat = np.array([split_rhat(draws[:, :, j]) if rhat_available else math.nan for j in range(dim)])
    bulk = np.array([ess_bulk(draws[:, :, j]) for j in range(dim)])
    tail = np.array([ess_tail(draws[:, :, j]) for j in range(dim)])
    n_divergent = 0 if divergent is None else int(np.sum(divergent))
    total = draws.shape[0] * draws.shape[1]
    return {
        "rhat": rhat,
        "ess_bulk": bulk,
        "ess_tail": tail,
        "divergences": n_divergent,
        "divergent_fraction": n_divergent / total if total else 0.0,
        "rhat_available": rhat_available,
    }


def diagnostics_pass(diag: dict, *, rhat_max: float, ess_min: float) -> bool:
    if diag["rhat_available"] and not np.all(diag["rhat"] < rhat_max):
        return False
    return bool(np.all(diag["ess_bulk"] > ess_min))
