import numpy as np
import pytest

from app.services.core import InputValidationError
from app.services.synth import (
    HIGH,
    LOW,
    designated_model_probs,
    f_true,
    gen_bernoulli_sqrt,
    gen_cells,
    gen_neal_regression,
    gen_spike_slab,
    gen_varying_weights,
)
from app.services.theory import model_elpds


class TestDesignation:
    def test_probabilities_are_a_simplex(self):
        q = designated_model_probs(np.array([[0.7, 0.3], [1.0, 0.0]]))
        np.testing.assert_allclose(q.sum(axis=1), 1.0)
        assert np.all(q > 0)

    def test_population_optimum_is_the_requested_weight(self):
        """The stationarity condition of the mixture score holds at w itself."""
        w = np.array([0.6, 0.3, 0.1])
        q = designated_model_probs(w)
        mix_high = HIGH * w + LOW * (1 - w)
        grad = np.array([q[k] * HIGH / mix_high[k] + sum(q[j] * LOW / mix_high[j] for j in range(3) if j != k) for k in range(3)])
        np.testing.assert_allclose(grad, grad[0])


class TestGenCells:
    def test_counts_labels_and_values(self):
        data = gen_cells(4, 3, [5, 10, 15, 20], 1.0, seed=3)
        assert data.lpd.n == 50
        assert data.lpd.K == 3
        assert data.feats.cell_labels == ("c1", "c2", "c3", "c4")
        np.testing.assert_array_equal(np.bincount(data.feats.cell_index), [5, 10, 15, 20])
        assert set(np.unique(data.lpd.values)) == {np.log(HIGH), np.log(LOW)}
        np.testing.assert_array_equal(np.sum(data.lpd.values == np.log(HIGH), axis=1), 1)
        assert data.truth["weights"].shape == (4, 3)

    def test_same_seed_same_data(self):
        a = gen_cells(3, 2, 30, 0.5, seed=12)
        b = gen_cells(3, 2, 30, 0.5, seed=12)
        np.testing.assert_array_equal(a.lpd.values, b.lpd.values)
        c = gen_cells(3, 2, 30, 0.5, seed=13)
        assert not np.array_equal(a.lpd.values, c.lpd.values)

    def test_designations_follow_the_probabilities(self):
        w = np.array([[0.9, 0.1]])
        data = gen_cells(1, 2, 20000, 1.0, seed=1, true_weights=w)
        share = np.mean(data.truth["designated"] == 0)
        assert share == pytest.approx(designated_model_probs(w)[0, 0], abs=0.01)

    def test_validation(self):
        with pytest.raises(InputValidationError):
            gen_cells(2, 1, 10, 1.0, seed=0)
        with pytest.raises(InputValidationError):
            gen_cells(2, 2, [10], 1.0, seed=0)
        with pytest.raises(InputValidationError):
            gen_cells(2, 2, [10, 0], 1.0, seed=0)
        with pytest.raises(InputValidationError):
            gen_cells(1, 2, 10, 1.0, seed=0, true_weights=np.array([[0.5, 0.6]]))


class TestOtherGenerators:
    def test_varying_weights_shape(self):
        data = gen_varying_weights(100, 3, seed=4)
        assert data.lpd.values.shape == (100, 3)
        assert data.feats.features.shape == (100, 1)
        np.testing.assert_allclose(data.truth["weights"].sum(axis=1), 1.0)
        with pytest.raises(InputValidationError):
            gen_varying_weights(10, 1, seed=4)

    def test_spike_slab_rows_outside_the_spike(self):
        data = gen_spike_slab(0.2, 500, seed=8)
        assert data.y.min() >= -3.0 and data.y.max() <= 1.0
        assert np.all(np.isfinite(data.lpd.values[:, 1]))
        with pytest.raises(InputValidationError):
            gen_spike_slab(1.5, 10, seed=8)

    def test_bernoulli_outcomes_are_binary(self):
        data = gen_bernoulli_sqrt(300, seed=2)
        assert set(np.unique(data.y)) <= {0, 1}
        assert data.lpd.values.shape == (300, 2)
        assert np.all(data.lpd.values <= 0)

    def test_regression_outlier_share(self):
        data = gen_neal_regression(20000, seed=6)
        assert data.truth["outlier"].mean() == pytest.approx(0.05, abs=0.006)
        residual = data.y - f_true(data.x)
        assert np.std(residual[~data.truth["outlier"]]) == pytest.approx(0.1, abs=0.005)

    def test_regression_mean_function(self):
        assert f_true(0.0) == pytest.approx(1.4)
        np.testing.assert_allclose(f_true(np.array([0.0, 1.0])), [1.4, 0.3 + 0.4 + 0.5 * np.sin(2.7) + 0.55])

    def test_regression_noise_variance(self):
        data = gen_neal_regression(400_000, seed=12)
        residual = data.y - f_true(data.x)
        assert residual.var() == pytest.approx(0.95 * 0.01 + 0.05 * 1.0, rel=0.05)


def test_spike_slab_column_mean_matches_its_elpd():
    data = gen_spike_slab(0.2, 100_000, seed=21)
    column = data.lpd.values[:, 0]
    expected = 0.75 * np.log(0.2) + 0.25 * np.log(0.1)
    assert model_elpds(data.scenario)[0] == pytest.approx(expected, abs=1e-3)
    assert expected == pytest.approx(-1.7827, abs=1e-3)
    assert abs(column.mean() - expected) < 3 * column.std() / np.sqrt(column.size)
