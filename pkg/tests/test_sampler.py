import math

import numpy as np
import pytest

from app.schemas import SamplerConfig
from app.services.sampler import (
    DualAveraging,
    SamplerError,
    _warmup_windows,
    find_reasonable_step_size,
    leapfrog,
    sample,
)


def standard_normal(q):
    return -0.5 * float(q @ q), -q


def energy_error(step_size, n_steps):
    q0, p0 = np.array([1.0]), np.array([0.5])
    _, grad = standard_normal(q0)
    q1, p1, logp1, _, ok = leapfrog(standard_normal, q0, p0, grad, step_size, n_steps, np.ones(1))
    assert ok
    before = 0.5 * float(q0 @ q0) + 0.5 * float(p0 @ p0)
    return abs(-logp1 + 0.5 * float(p1 @ p1) - before)


class TestLeapfrog:
    def test_energy_error_is_second_order(self):
        coarse = energy_error(0.1, 5)
        fine = energy_error(0.05, 10)
        assert 3.5 <= coarse / fine <= 4.5

    def test_reversible(self):
        q0, p0 = np.array([0.3, -1.2]), np.array([0.8, 0.1])
        _, grad = standard_normal(q0)
        q1, p1, _, grad1, _ = leapfrog(standard_normal, q0, p0, grad, 0.2, 7, np.ones(2))
        q2, p2, _, _, _ = leapfrog(standard_normal, q1, -p1, grad1, 0.2, 7, np.ones(2))
        np.testing.assert_allclose(q2, q0, atol=1e-12)
        np.testing.assert_allclose(-p2, p0, atol=1e-12)

    def test_non_finite_density_stops_the_trajectory(self):
        def wall(q):
            if q[0] > 0.5:
                return -math.inf, np.zeros_like(q)
            return standard_normal(q)

        q0 = np.array([0.0])
        _, _, _, _, ok = leapfrog(wall, q0, np.array([5.0]), standard_normal(q0)[1], 0.2, 10, np.ones(1))
        assert not ok


class TestAdaptation:
    def test_dual_averaging_moves_toward_target(self):
        eager = DualAveraging(0.1, 0.8)
        for _ in range(50):
            eager.update(1.0)
        timid = DualAveraging(0.1, 0.8)
        for _ in range(50):
            timid.update(0.0)
        assert eager.final_step_size > 0.1 > timid.final_step_size

    def test_reasonable_step_size_is_positive(self):
        rng = np.random.default_rng(42)
        q = np.zeros(3)
        logp, grad = standard_normal(q)
        eps = find_reasonable_step_size(standard_normal, q, logp, grad, np.ones(3), rng)
        assert 1e-3 < eps < 10.0

    def test_warmup_windows(self):
        assert _warmup_windows(1000) == (150, 600)
        assert _warmup_windows(100) == (15, 60)


class TestSample:
    def test_initial_point_must_be_finite(self):
        cfg = SamplerConfig(chains=1, warmup=100, draws_per_chain=10, seed=1)
        with pytest.raises(SamplerError) as err:
            sample(lambda q: (-math.inf, np.zeros_like(q)), np.zeros(2), cfg)
        assert err.value.reason == "init"

    def test_one_init_per_chain(self):
        cfg = SamplerConfig(chains=3, warmup=100, draws_per_chain=10, seed=1)
        with pytest.raises(SamplerError):
            sample(standard_normal, np.zeros((2, 4)), cfg)

    def test_threads_do_not_change_draws(self):
        cfg = SamplerConfig(chains=2, warmup=100, draws_per_chain=50, seed=9)
        serial = sample(standard_normal, np.zeros(2), cfg, threads=1)
        parallel = sample(standard_normal, np.zeros(2), cfg, threads=2)
        np.testing.assert_array_equal(serial.draws, parallel.draws)
        assert serial.draws.shape == (2, 50, 2)
        assert serial.flat_draws().shape == (100, 2)

    @pytest.mark.slow
    def test_ten_dimensional_normal(self):
        cfg = SamplerConfig(chains=4, warmup=500, draws_per_chain=500, seed=2024)
        result = sample(standard_normal, np.zeros(10), cfg, param_names=[f"x{i}" for i in range(10)])
        flat = result.flat_draws()
        np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=0.15)
        np.testing.assert_allclose(flat.var(axis=0), 1.0, atol=0.2)
        assert np.all(result.diagnostics["rhat"] < 1.05)
        assert result.diagnostics["divergences"] == 0
        assert result.param_names[0] == "x0"

    @pytest.mark.slow
    def test_strongly_correlated_pair(self):
        cov = np.array([[1.0, 0.9], [0.9, 1.0]])
        precision = np.linalg.inv(cov)

        def correlated(q):
            return -0.5 * float(q @ precision @ q), -(precision @ q)

        cfg = SamplerConfig(chains=4, warmup=1000, draws_per_chain=1000, seed=77)
        flat = sample(correlated, np.zeros(2), cfg).flat_draws()
        assert np.corrcoef(flat.T)[0, 1] == pytest.approx(0.9, abs=0.05)
