from __future__ import annotations

import json
import math
import sys
import tempfile
import time
from collections.abc import Callable
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from app.main import main as cli
from app.schemas import SamplerConfig
from app.services.core import FeatureSet, LpdMatrix, softmax_weights
from app.services.hier import build_model, fit_hierarchical, fit_map, value_and_grad
from app.services.optimize import fit_complete_pooling, fit_no_pooling
from app.services.priors import KernelSpec, build_prior
from app.services.psis import fit_gpd_tail, psis_loo, stacked_loo
from app.services.sampler import sample
from app.services.scenarios import bernoulli_sqrt, random_piecewise, spike_slab
from app.services.synth import gen_cells, gen_spike_slab
from app.services.theory import (
    delta_curve,
    max_separation,
    model_elpds,
    population_stacking,
    pseudo_bma_weight,
    theorem_bounds,
    winner_partition,
)

Check = Callable[[], list[str]]


def _expect(failures: list[str], ok: bool, message: str) -> None:
    if not ok:
        failures.append(message)


def toy_optimum() -> list[str]:
    failures: list[str] = []
    w = population_stacking(spike_slab(0.01))
    _expect(failures, abs(w[0] - 0.755) <= 0.002, f"grid w1={w[0]:.4f}")
    sampled = fit_complete_pooling(gen_spike_slab(0.01, 10000, seed=1).lpd).weights
    _expect(failures, abs(sampled[0] - 0.755) <= 0.02, f"sampled w1={sampled[0]:.4f}")
    return failures


def winner_masses() -> list[str]:
    masses = winner_partition(spike_slab(0.01, cells=2000)).J_masses
    return [] if np.allclose(masses, [0.75, 0.25], atol=1e-3) else [f"masses={masses}"]


def bernoulli_example() -> list[str]:
    failures: list[str] = []
    sc = bernoulli_sqrt()
    elpds = model_elpds(sc)
    _expect(failures, abs(elpds[0] - math.log(0.5)) <= 1e-3, f"elpd1={elpds[0]:.5f}")
    _expect(failures, abs(elpds[1] + 7.0 / 12.0) <= 1e-3, f"elpd2={elpds[1]:.5f}")
    (start, end), *rest = winner_partition(sc).intervals[0]
    _expect(failures, not rest and abs(start - 0.25) <= 0.005, f"interval start={start:.4f}")
    _expect(failures, abs(end - 0.6747) <= 0.005, f"interval end={end:.4f}")
    return failures


def bound_tightness() -> list[str]:
    failures: list[str] = []
    toy = spike_slab(0.01)
    t3 = theorem_bounds(toy, max_separation(toy)).check("T3")
    floor = t3.extra["g_star_minus_eps"]
    _expect(failures, abs(t3.value - 0.596) <= 0.002, f"gain={t3.value:.4f}")
    _expect(failures, 0 <= t3.value - floor < 0.02, f"gain={t3.value:.4f} floor={floor:.4f}")
    for delta in np.round(np.arange(0.01, 0.50, 0.01), 2):
        sc = spike_slab(float(delta))
        report = theorem_bounds(sc, max_separation(sc))
        _expect(failures, report.all_passed, f"delta={delta} failed={[c.name for c in report.checks if not c.passed]}")
    rng = np.random.default_rng(42)
    for trial in range(50):
        report = theorem_bounds(random_piecewise(int(rng.integers(2, 5)), rng), 0.5)
        _expect(failures, report.all_passed, f"random scenario {trial} failed={[c.name for c in report.checks if not c.passed]}")
    return failures


def opposite_directions() -> list[str]:
    failures: list[str] = []
    curve = delta_curve(np.round(np.arange(0.01, 0.50, 0.01), 2))
    _expect(failures, curve["stacking_non_decreasing"], "stacking weight decreases somewhere")
    _expect(failures, curve["bma_strictly_decreasing"], "pseudo-BMA weight is not strictly decreasing")
    flat = [row["w1_stacking"] for row in curve["rows"] if row["delta"] > 1 / 3]
    _expect(failures, all(w == 1.0 for w in flat), "second model keeps weight above delta=1/3")
    spot = pseudo_bma_weight(spike_slab(0.2), 1)[0]
    _expect(failures, abs(spot - 2.0 / 3.0) <= 1e-3, f"pseudo-BMA spot value={spot:.4f}")
    return failures


def limiting_cases() -> list[str]:
    failures: list[str] = []
    data = gen_cells(3, 2, [30, 60, 120], 1.0, seed=7)
    lpd, feats = data.lpd, data.feats
    prior = build_prior("basic")
    pooled = fit_complete_pooling(lpd).weights
    tight = fit_map(lpd, feats, prior, fixed_sigma=1e-6).cell_weights
    _expect(failures, np.allclose(tight, np.tile(pooled, (3, 1)), atol=1e-3), f"sigma=1e-6 {tight.tolist()} vs {pooled.tolist()}")
    separate = fit_no_pooling(lpd, feats).weights
    loose = fit_map(lpd, feats, prior, fixed_sigma=1e6).cell_weights
    _expect(failures, np.allclose(loose, separate, atol=1e-3), f"sigma=1e6 {loose.tolist()} vs {separate.tolist()}")
    return failures


def shrinkage_ordering() -> list[str]:
    """Two large cells at opposite extremes around an even small cell."""
    truth = np.array([[0.95, 0.05], [0.5, 0.5], [0.05, 0.95]])
    cfg = SamplerConfig(chains=2, warmup=400, draws_per_chain=400, max_leapfrog=32)
    wins = 0
    for rep in range(20):
        data = gen_cells(3, 2, [200, 5, 200], 1.0, seed=100 + rep, true_weights=truth)
        draws = fit_hierarchical(
            data.lpd,
            data.feats,
            build_prior("basic"),
            cfg.model_copy(update={"seed": rep}),
            check_diagnostics=False,
        )
        mu = float(draws.theta[:, draws.model.layout.slices()["mu"]].mean())
        eta = draws.cell_eta[:, 0]
        wins += abs(eta[1] - mu) < abs(eta[0] - mu)
    return [] if wins >= 19 else [f"small cell closer to the mean in {wins}/20 replications"]


def gradient_suite() -> list[str]:
    cases = [
        ("basic", {}),
        ("grouped", {}),
        ("feature_decomposed", {}),
        ("correlated", {"omega": [[1.0, 0.4, 0.1], [0.4, 1.0, 0.3], [0.1, 0.3, 1.0]]}),
        ("gp", {"kernel": KernelSpec()}),
        ("gp", {"kernel": KernelSpec(kind="zero_one")}),
    ]
    rng = np.random.default_rng(8)
    failures: list[str] = []
    h = 1e-5
    for case in range(100):
        kind, extra = cases[case % len(cases)]
        n = int(rng.integers(9, 30))
        K = int(rng.integers(2, 4))
        cells = np.arange(n) % 3
        on_cells = kind == "gp" and extra["kernel"].kind == "zero_one"
        features = None if on_cells else rng.normal(size=(n, 2))
        feats = FeatureSet(cell_index=cells, features=features, cell_labels=("a", "b", "c"))
        prior = build_prior(kind, centered=bool(case % 2), sample_mu0=kind == "basic" and case % 4 == 0, **extra)
        model = build_model(LpdMatrix(values=rng.normal(-1.0, 0.8, size=(n, K))), feats, prior)
        theta = rng.normal(scale=0.4, size=model.layout.size)
        _, grad = value_and_grad(model, theta)
        fd = np.empty_like(theta)
        for i in range(theta.size):
            step = np.zeros_like(theta)
            step[i] = h
            fd[i] = (value_and_grad(model, theta + step)[0] - value_and_grad(model, theta - step)[0]) / (2 * h)
        error = np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), 1.0)
        _expect(failures, error < 1e-6, f"case {case} kind={kind} relative error={error:.2e}")
    return failures


def sampler_calibration() -> list[str]:
    failures: list[str] = []
    cfg = SamplerConfig(chains=4, warmup=1000, draws_per_chain=1000, seed=2024)
    result = sample(lambda q: (-0.5 * float(q @ q), -q), np.zeros(10), cfg)
    flat = result.flat_draws()
    se = flat.std(axis=0) / np.sqrt(np.asarray(result.diagnostics["ess_bulk"]))
    _expect(failures, np.all(np.abs(flat.mean(axis=0)) < 4 * se), f"means={flat.mean(axis=0).round(3).tolist()}")
    _expect(failures, np.all(result.diagnostics["rhat"] < 1.01), f"rhat max={np.max(result.diagnostics['rhat']):.4f}")
    _expect(failures, result.diagnostics["divergences"] == 0, f"divergences={result.diagnostics['divergences']}")
    return failures


def _grid_posterior(values: np.ndarray, grid: np.ndarray, prior_sd: float) -> np.ndarray:
    """Log posterior of a single logit on a grid, for two models mixed with weight softmax(a, 0)."""
    w = softmax_weights(grid[:, None])
    mix = logsumexp(np.log(w)[:, None, :] + values[None, :, :], axis=2)
    return stats.norm.logpdf(grid, 0.0, prior_sd) + mix.sum(axis=1), mix


def psis_checks() -> list[str]:
    failures: list[str] = []
    rng = np.random.default_rng(3)
    khat = fit_gpd_tail(stats.genpareto.rvs(0.3, size=20000, random_state=rng)).khat
    _expect(failures, abs(khat - 0.3) <= 0.03, f"gpd khat={khat:.3f}")

    y = np.array([-1.2, 0.3, 0.8, 1.5, -0.4])
    precision = 0.01 + y.size
    theta = rng.normal(y.sum() / precision, 1 / math.sqrt(precision), size=10000)
    loo = psis_loo(stats.norm.logpdf(y[None, :], theta[:, None], 1.0)).lpd
    loo_precision = 0.01 + y.size - 1
    exact = stats.norm.logpdf(y, (y.sum() - y) / loo_precision, np.sqrt(1 + 1 / loo_precision))
    _expect(failures, np.max(np.abs(loo - exact)) <= 0.02, f"conjugate loo max error={np.max(np.abs(loo - exact)):.4f}")

    # stacked loo against exact refits of a one-parameter weight posterior
    values = np.column_stack([rng.normal(-1.0, 0.6, 20), rng.normal(-1.2, 0.9, 20)])
    grid = np.linspace(-8.0, 8.0, 4001)
    log_post, mix = _grid_posterior(values, grid, 2.0)
    p = np.exp(log_post - log_post.max())
    cdf = np.cumsum(p) / p.sum()
    a = np.interp(rng.uniform(size=4000), cdf, grid)
    weights = np.broadcast_to(softmax_weights(a[:, None])[:, None, :], (a.size, 20, 2))
    approx = stacked_loo(LpdMatrix(values=values), weights).pointwise
    brute = np.empty(20)
    for i in range(20):
        held_out = log_post - mix[:, i]
        brute[i] = logsumexp(held_out + mix[:, i]) - logsumexp(held_out)
    gap = float(np.mean(np.abs(approx - brute)))
    _expect(failures, gap <= 0.05, f"stacked loo vs refits mean gap={gap:.4f}")
    return failures


def _run_cli(argv: list[str]) -> int:
    return cli([str(a) for a in argv])


def synthetic_pipeline() -> list[str]:
    failures: list[str] = []
    with tempfile.TemporaryDirectory() as tmp:
        base = Path(tmp)
        _run_cli(["--seed", 5, "simulate", "--kind", "cells", "--n", 80, "--n-cells", 3, "--out", base / "data"])
        lpd, feats = base / "data" / "lpd.csv", base / "data" / "features.csv"
        results = []
        for name in ("first", "second"):
            out = base / name
            fit_code = _run_cli(["--seed", 11, "fit", "--method", "hier", "--lpd", lpd, "--features", feats, "--out", out])
            loo_code = _run_cli(["--seed", 11, "loo", "--lpd", lpd, "--features", feats, "--draws", out / "draws.csv", "--out", out])
            _expect(failures, fit_code == 0 and loo_code == 0, f"{name} run exit codes fit={fit_code} loo={loo_code}")
            if fit_code == 0 and loo_code == 0:
                diag = json.loads((out / "diagnostics.json").read_text(encoding="utf-8"))
                _expect(failures, diag["passed"], f"{name} run diagnostics failed")
                results.append(((out / "draws.csv").read_bytes(), json.loads((out / "loo.json").read_text(encoding="utf-8"))["elpd"]))
        if len(results) == 2:
            _expect(failures, results[0] == results[1], "repeated runs differ")
    return failures


CASES: list[tuple[str, Check]] = [
    ("toy optimum", toy_optimum),
    ("winner masses", winner_masses),
    ("bernoulli example", bernoulli_example),
    ("bound tightness", bound_tightness),
    ("opposite directions", opposite_directions),
    ("limiting cases", limiting_cases),
    ("shrinkage ordering", shrinkage_ordering),
    ("gradients", gradient_suite),
    ("sampler calibration", sampler_calibration),
    ("psis", psis_checks),
    ("synthetic pipeline", synthetic_pipeline),
]


def main() -> int:
    failures: list[str] = []
    for name, check in CASES:
        started = time.perf_counter()
        problems = check()
        print(f"{name}: {'ok' if not problems else 'failed'} ({time.perf_counter() - started:.1f}s)", file=sys.stderr)
        failures.extend(f"{name}: {problem}" for problem in problems)

    if failures:
        print("FAILED")
        for failure in failures:
            print(f"- {failure}")
        return 1

    print(f"OK {len(CASES)} cases")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
