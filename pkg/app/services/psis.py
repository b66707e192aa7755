from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import genpareto

from app.config import settings
from app.schemas import LooReport
from app.services.core import InputValidationError, LpdMatrix, validate

logger = logging.getLogger(__name__)

# Zhang-Stephens profile settings and the weak prior pulling khat toward 0.5
PRIOR_BS = 3.0
PRIOR_K = 10.0
MIN_DRAWS = 10
MIN_TAIL = 5


@dataclass(frozen=True)
class GpdFit:
    khat: float
    sigma: float
    status: str


@dataclass
class PsisResult:
    lpd: np.ndarray
    khat: np.ndarray
    flagged: list[int] = field(default_factory=list)

    @property
    def status(self) -> str:
        return khat_status(self.khat)


@dataclass
class StackedLoo:
    elpd: float
    se: float
    pointwise: np.ndarray
    khat: np.ndarray
    flagged: list[int]

    @property
    def status(self) -> str:
        return khat_status(self.khat)

    def to_report(self) -> LooReport:
        return LooReport(
            elpd=float(self.elpd),
            se=float(self.se),
            pointwise=[float(v) for v in self.pointwise],
            khat=[float(k) if math.isfinite(k) else None for k in self.khat],
            flagged=self.flagged,
            status=self.status,  # type: ignore[arg-type]
        )


def khat_status(khat: np.ndarray) -> str:
    khat = np.asarray(khat, dtype=float)
    finite = khat[~np.isneginf(khat)]
    if finite.size == 0 or np.all(finite <= settings.khat_good):
        return "good"
    if np.all(finite <= settings.khat_ok):
        return "ok"
    return "unreliable"


def tail_length(S: int) -> int:
    return int(math.ceil(min(settings.psis_tail_fraction * S, settings.psis_tail_sqrt * math.sqrt(S))))


def fit_gpd_tail(x: np.ndarray) -> GpdFit:
    """Generalized Pareto fit to positive exceedances by the Zhang-Stephens profile posterior.

    The shape estimate is regularized toward 0.5 with a weak prior worth ten observations.
    A constant tail cannot be fitted and returns the -inf sentinel.
    """
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    if n < MIN_TAIL:
        raise InputValidationError(f"tail needs at least {MIN_TAIL} values, got {n}")
    if not np.all(np.isfinite(x)):
        raise InputValidationError("tail values must be finite")
    if x[-1] - x[0] <= 0 or x[-1] <= 0:
        return GpdFit(khat=-math.inf, sigma=math.nan, status="stable")

    m = 30 + int(math.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1, dtype=float) - 0.5))
    quartile = x[max(int(n / 4 + 0.5) - 1, 0)]
    if quartile <= 0:
        quartile = x[x > 0][0]
    b = b / (PRIOR_BS * quartile) + 1.0 / x[-1]

    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.log1p(-b[:, None] * x[None, :]).mean(axis=1)
        profile = n * (np.log(-(b / k)) - k - 1.0)
    profile = np.where(np.isfinite(profile), profile, -np.inf)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        weights = 1.0 / np.exp(profile - profile[:, None]).sum(axis=1)
    weights = np.nan_to_num(weights, nan=0.0)
    keep = weights >= 10 * np.finfo(float).eps
    b, weights = b[keep], weights[keep]
    weights = weights / weights.sum()

    b_post = float(np.sum(b * weights))
    k_post = float(np.log1p(-b_post * x).mean())
    sigma = -k_post / b_post
    k_post = (n * k_post + PRIOR_K * 0.5) / (n + PRIOR_K)
    return GpdFit(khat=k_post, sigma=sigma, status=_band(k_post))


def _band(khat: float) -> str:
    if khat <= settings.khat_good:
        return "good"
    if khat <= settings.khat_ok:
        return "ok"
    return "unreliable"


def psis_smooth(log_ratios: np.ndarray) -> tuple[np.ndarray, float]:
    """Pareto-smoothed, self-normalized log weights for one vector of raw log ratios."""
    lw = np.asarray(log_ratios, dtype=float).copy()
    S = lw.size
    lw -= lw.max()
    if np.ptp(lw) == 0:
        return lw - math.log(S), -math.inf

    M = tail_length(S)
    if M < MIN_TAIL:
        return lw - logsumexp(lw), math.inf
    order = np.argsort(lw)
    cutoff = max(lw[order[-M - 1]] if M < S else lw[order[0]] - 1.0, math.log(np.finfo(float).tiny))
    tail = lw > cutoff
    if tail.sum() < MIN_TAIL:
        return lw - logsumexp(lw), math.inf

    tail_values = lw[tail]
    exp_cutoff = math.exp(cutoff)
    fit = fit_gpd_tail(np.exp(tail_values) - exp_cutoff)
    khat = fit.khat
    if math.isfinite(khat) and fit.sigma > 0:
        count = tail_values.size
        probs = (np.arange(1, count + 1) - 0.5) / count
        smoothed = np.log(genpareto.ppf(probs, c=khat, scale=fit.sigma) + exp_cutoff)
        replaced = np.empty(count)
        replaced[np.argsort(tail_values)] = smoothed
        lw[tail] = replaced
    lw = np.minimum(lw, 0.0)
    return lw - logsumexp(lw), khat


def _loo_column(log_ratios: np.ndarray, loglik: np.ndarray) -> tuple[float, float]:
    lw, khat = psis_smooth(log_ratios)
    return float(logsumexp(lw + loglik)), khat


def _flag(khat: np.ndarray) -> list[int]:
    flagged = [int(i) for i in np.flatnonzero(khat > settings.khat_ok)]
    if flagged:
        logger.warning("psis khat above %s count=%s first=%s", settings.khat_ok, len(flagged), flagged[:10])
    return flagged


def _columns(loglik: np.ndarray, log_ratios: np.ndarray, threads: int | None) -> tuple[np.ndarray, np.ndarray]:
    n = loglik.shape[1]
    workers = max(1, threads or settings.threads)
    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: _loo_column(log_ratios[:, i], loglik[:, i]), range(n)))
    else:
        results = [_loo_column(log_ratios[:, i], loglik[:, i]) for i in range(n)]
    lpd = np.array([r[0] for r in results])
    khat = np.array([r[1] for r in results])
    return lpd, khat


def _checked_loglik(loglik: np.ndarray) -> np.ndarray:
    loglik = np.asarray(loglik, dtype=float)
    if loglik.ndim != 2:
        raise InputValidationError("log likelihood draws must be an S x n matrix")
    if loglik.shape[0] < MIN_DRAWS:
        raise InputValidationError(f"psis needs at least {MIN_DRAWS} draws, got {loglik.shape[0]}")
    bad = np.argwhere(~np.isfinite(loglik))
    if bad.size:
        raise InputValidationError(
            f"non-finite log likelihood at (s, i) = {tuple(int(v) for v in bad[0])}",
            {"count": int(len(bad))},
        )
    return loglik


def psis_loo(loglik: np.ndarray, *, threads: int | None = None) -> PsisResult:
    """Leave-one-out log predictive densities from one set of posterior draws (S x n)."""
    loglik = _checked_loglik(loglik)
    if loglik.shape[0] < 100:
        logger.info("psis with few draws S=%s", loglik.shape[0])
    lpd, khat = _columns(loglik, -loglik, threads)
    return PsisResult(lpd=lpd, khat=khat, flagged=_flag(khat))


def loco_lpd(loglik: np.ndarray, cell_index: np.ndarray, *, threads: int | None = None) -> PsisResult:
    """Leave-one-cell-out log predictive densities; each observation gets its cell's smoothed weights."""
    loglik = _checked_loglik(loglik)
    cells = np.asarray(cell_index)
    if cells.shape != (loglik.shape[1],):
        raise InputValidationError("cell index must have one entry per observation")
    groups = [np.flatnonzero(cells == label) for label in np.unique(cells)]

    def held_out(members: np.ndarray) -> tuple[np.ndarray, float]:
        lw, k = psis_smooth(-loglik[:, members].sum(axis=1))
        return logsumexp(lw[:, None] + loglik[:, members], axis=0), k

    workers = max(1, threads or settings.threads)
    if workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(held_out, groups))
    else:
        results = [held_out(members) for members in groups]
    lpd = np.empty(loglik.shape[1])
    khat = np.empty(loglik.shape[1])
    for members, (values, k) in zip(groups, results):
        lpd[members] = values
        khat[members] = k
    return PsisResult(lpd=lpd, khat=khat, flagged=_flag(khat))


def stacked_loo(lpd: LpdMatrix, draws: "np.ndarray | object", *, threads: int | None = None) -> StackedLoo:
    """Leave-one-out elpd of the stacked predictive itself.

    `draws` is a fitted WeightDraws or an S x n x K array of pointwise weights.
    """
    pointwise_weights = getattr(draws, "pointwise", draws)
    weights = np.asarray(pointwise_weights, dtype=float)
    lpd, _ = validate(lpd, min_models=1)
    if weights.ndim != 3 or weights.shape[1:] != (lpd.n, lpd.K):
        raise InputValidationError(
            "weight draws are not aligned with the log density matrix",
            {"weights": list(weights.shape), "lpd": [lpd.n, lpd.K]},
        )
    if weights.shape[0] < MIN_DRAWS:
        raise InputValidationError(f"stacked loo needs at least {MIN_DRAWS} draws, got {weights.shape[0]}")
    with np.errstate(divide="ignore"):
        log_mix = logsumexp(np.log(weights) + lpd.values[None, :, :], axis=2)
    pointwise, khat = _columns(log_mix, -log_mix, threads)
    n = lpd.n
    se = float(math.sqrt(n * pointwise.var())) if n > 1 else 0.0
    result = StackedLoo(
        elpd=float(pointwise.sum()),
        se=se,
        pointwise=pointwise,
        khat=khat,
        flagged=_flag(khat),
    )
    logger.info("stacked loo elpd=%.4f se=%.4f status=%s", result.elpd, result.se, result.status)
    return result
