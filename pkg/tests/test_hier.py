import dataclasses
import math

import numpy as np
import pytest

from app.config import settings
from app.schemas import FitOptions, SamplerConfig
from app.services import hier
from app.services.core import FeatureSet, InputValidationError, LpdMatrix, softmax_weights
from app.services.hier import (
    DiagnosticsError,
    build_model,
    combine_predictions,
    draws_from_theta,
    fit_hierarchical,
    fit_map,
    pointwise_differences,
    predict_weights,
    time_reweight,
    value_and_grad,
)
from app.services.optimize import fit_complete_pooling, fit_no_pooling
from app.services.priors import build_prior
from app.services.sampler import sample
from app.services.synth import gen_cells

TIGHT = FitOptions(tol=1e-14, max_iters=200000)
CELL_WEIGHTS = np.array([[0.7, 0.3], [0.4, 0.6], [0.55, 0.45]])


@pytest.fixture
def designed_cells():
    data = gen_cells(3, 2, 200, 1.0, seed=7, true_weights=CELL_WEIGHTS)
    return data.lpd, data.feats


class TestTimeReweight:
    def test_recent_observations_weigh_more(self):
        tw = time_reweight(np.array([0.0, 5.0, 10.0]), T=10.0, gamma=0.5)
        np.testing.assert_allclose(tw.pi, [0.5, 1.25, 1.5])
        assert tw.multiplier.mean() == pytest.approx(1.0)

    def test_times_outside_the_horizon(self):
        with pytest.raises(InputValidationError) as err:
            time_reweight(np.array([0.0, 11.0]), T=10.0, gamma=0.5)
        assert err.value.details["indices"] == [1]
        with pytest.raises(InputValidationError):
            time_reweight(np.array([1.0]), T=10.0, gamma=0.0)

    def test_weights_enter_the_likelihood(self, designed_cells):
        lpd, feats = designed_cells
        tw = time_reweight(np.linspace(0.0, 1.0, lpd.n), T=1.0, gamma=1.0)
        model = build_model(lpd, feats, build_prior("basic"), tw)
        np.testing.assert_allclose(model.row_weights, tw.multiplier)
        with pytest.raises(InputValidationError):
            build_model(lpd, feats, build_prior("basic"), time_reweight(np.zeros(3), T=1.0, gamma=1.0))


class TestModelLayout:
    def test_names_follow_blocks(self, three_cell_counts):
        lpd, feats = three_cell_counts
        model = build_model(lpd, feats, build_prior("basic"))
        names = model.layout.names()
        assert names[:3] == ["alpha[0,0]", "alpha[1,0]", "alpha[2,0]"]
        assert names[3:] == ["mu[0]", "log_sigma[0]"]
        theta = np.arange(model.layout.size, dtype=float)
        np.testing.assert_array_equal(model.layout.pack(model.layout.unpack(theta)), theta)

    def test_grouped_sigma_has_one_row_per_group(self, rng):
        lpd = LpdMatrix(values=rng.normal(size=(12, 3)))
        feats = FeatureSet(cell_index=np.repeat(np.arange(3), 4), features=rng.normal(size=(12, 2)), cell_labels=("a", "b", "c"))
        model = build_model(lpd, feats, build_prior("grouped"))
        assert model.layout.unpack(np.zeros(model.layout.size)).log_sigma.shape == (2, 2)

    def test_correlated_prior_needs_matching_cells(self, three_cell_counts, rng):
        lpd, feats = three_cell_counts
        with pytest.raises(InputValidationError, match="cell index"):
            build_model(lpd, FeatureSet(features=rng.normal(size=(lpd.n, 1))), build_prior("correlated"))
        with pytest.raises(InputValidationError, match="omega dimension"):
            build_model(lpd, feats, build_prior("correlated", omega=np.eye(2)))

    def test_unknown_unseen_policy(self, three_cell_counts):
        lpd, feats = three_cell_counts
        with pytest.raises(InputValidationError):
            build_model(lpd, feats, build_prior("basic"), unseen_cells="ignore")


class TestMap:
    def test_tiny_sigma_is_complete_pooling(self, designed_cells):
        lpd, feats = designed_cells
        fit = fit_map(lpd, feats, build_prior("basic"), fixed_sigma=1e-6)
        pooled = fit_complete_pooling(lpd, TIGHT)
        np.testing.assert_allclose(fit.cell_weights, np.tile(pooled.weights, (3, 1)), atol=1e-3)

    def test_huge_sigma_is_no_pooling(self, designed_cells):
        lpd, feats = designed_cells
        fit = fit_map(lpd, feats, build_prior("basic"), fixed_sigma=1e6)
        separate = fit_no_pooling(lpd, feats, TIGHT)
        np.testing.assert_allclose(fit.cell_weights, separate.weights, atol=1e-3)

    def test_small_cells_shrink_more(self, three_cell_counts):
        """Cells A and B share their split; B has far less data and sits closer to the mean."""
        lpd, feats = three_cell_counts
        fit = fit_map(lpd, feats, build_prior("basic"), fixed_sigma=1.0)
        eta = np.log(fit.cell_weights[:, 0] / fit.cell_weights[:, 1])
        mu = float(fit.params.mu[0])
        assert abs(eta[1] - mu) < abs(eta[0] - mu)
        separate = fit_no_pooling(lpd, feats, TIGHT).weights
        assert fit.cell_weights[1, 0] < separate[1, 0]
        assert fit.grad_norm < 1e-5

    def test_fixed_sigma_must_be_positive(self, three_cell_counts):
        lpd, feats = three_cell_counts
        with pytest.raises(InputValidationError):
            fit_map(lpd, feats, build_prior("basic"), fixed_sigma=0.0)


class TestPrediction:
    def _draws(self, three_cell_counts, rng, policy="hierarchical_mean"):
        lpd, feats = three_cell_counts
        model = build_model(lpd, feats, build_prior("basic"), unseen_cells=policy)
        theta = rng.normal(scale=0.5, size=(6, model.layout.size))
        return draws_from_theta(model, theta)

    def test_seen_cells_match_training_weights(self, three_cell_counts, rng):
        draws = self._draws(three_cell_counts, rng)
        new = FeatureSet(cell_index=np.array([2, 0]), cell_labels=("A", "B", "C"))
        predicted = predict_weights(draws, new)
        np.testing.assert_allclose(predicted, draws.cell_weights[[2, 0]])
        np.testing.assert_allclose(predicted.sum(axis=1), 1.0)

    def test_unseen_cell_falls_back_to_the_mean(self, three_cell_counts, rng):
        draws = self._draws(three_cell_counts, rng)
        predicted = predict_weights(draws, FeatureSet(cell_index=np.array([0]), cell_labels=("Z",)))
        expected = softmax_weights(draws.theta[:, [draws.model.layout.slices()["mu"].start]]).mean(axis=0)
        np.testing.assert_allclose(predicted[0], expected)

    def test_unseen_cell_error_policy(self, three_cell_counts, rng):
        draws = self._draws(three_cell_counts, rng, policy="error")
        with pytest.raises(InputValidationError, match="unseen"):
            predict_weights(draws, FeatureSet(cell_index=np.array([0]), cell_labels=("Z",)))

    def test_draw_table_width_is_checked(self, three_cell_counts):
        lpd, feats = three_cell_counts
        model = build_model(lpd, feats, build_prior("basic"))
        with pytest.raises(InputValidationError):
            draws_from_theta(model, np.zeros((3, model.layout.size + 1)))


class TestCombinePredictions:
    def test_log_mixture(self):
        value = combine_predictions(np.array([0.25, 0.75]), np.array([-1.0, -2.0]))
        assert value == pytest.approx(math.log(0.25 * math.exp(-1.0) + 0.75 * math.exp(-2.0)))
        assert value == pytest.approx(-1.64263, abs=1e-5)

    def test_zero_weight_model_is_ignored(self):
        assert combine_predictions(np.array([1.0, 0.0]), np.array([-0.5, -np.inf])) == pytest.approx(-0.5)

    def test_no_mass(self):
        with pytest.raises(InputValidationError):
            combine_predictions(np.zeros(2), np.zeros(2))

    def test_mean_weights_match_the_average_of_combined_densities(self, three_cell_counts, rng):
        lpd, feats = three_cell_counts
        model = build_model(lpd, feats, build_prior("basic"))
        draws = draws_from_theta(model, rng.normal(scale=0.8, size=(50, model.layout.size)))
        for i in (0, 201, lpd.n - 1):
            per_draw = [math.exp(combine_predictions(draws.pointwise[s, i], lpd.values[i])) for s in range(draws.S)]
            pooled = math.exp(combine_predictions(draws.mean_weights[i], lpd.values[i]))
            assert np.mean(per_draw) == pytest.approx(pooled, rel=1e-12)


def test_pointwise_differences_per_cell(three_cell_counts):
    lpd, feats = three_cell_counts
    delta, means = pointwise_differences(lpd, feats)
    assert delta.shape == (lpd.n, 1)
    gap = -math.log(0.01)
    np.testing.assert_allclose(means[:, 0], [0.6 * gap, 0.6 * gap, -0.6 * gap])


@pytest.mark.slow
class TestFitHierarchical:
    def test_cell_weights_follow_the_data(self, designed_cells, quick_sampler):
        lpd, feats = designed_cells
        draws = fit_hierarchical(lpd, feats, build_prior("basic"), quick_sampler, check_diagnostics=False)
        assert draws.S == quick_sampler.chains * quick_sampler.draws_per_chain
        assert draws.pointwise.shape == (draws.S, lpd.n, 2)
        np.testing.assert_allclose(draws.cell_weights.sum(axis=1), 1.0)
        order = np.argsort(draws.cell_weights[:, 0])
        np.testing.assert_array_equal(order, [1, 2, 0])
        assert draws.diagnostics["divergent_fraction"] <= settings.max_divergent_fraction

    def test_same_seed_same_draws(self, three_cell_counts, quick_sampler):
        lpd, feats = three_cell_counts
        a = fit_hierarchical(lpd, feats, build_prior("basic"), quick_sampler, check_diagnostics=False)
        b = fit_hierarchical(lpd, feats, build_prior("basic"), quick_sampler, check_diagnostics=False, threads=2)
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_failed_diagnostics_raise(self, three_cell_counts, quick_sampler, monkeypatch):
        lpd, feats = three_cell_counts
        monkeypatch.setattr(hier, "settings", dataclasses.replace(settings, ess_min=1e9))
        with pytest.raises(DiagnosticsError) as err:
            fit_hierarchical(lpd, feats, build_prior("basic"), quick_sampler)
        assert "ess_bulk" in err.value.diagnostics

    def test_single_cell_matches_complete_pooling(self, quick_sampler):
        data = gen_cells(1, 2, 200, 0.0, seed=5, true_weights=np.array([[0.7, 0.3]]))
        draws = fit_hierarchical(data.lpd, data.feats, build_prior("basic"), quick_sampler, check_diagnostics=False)
        pooled = fit_complete_pooling(data.lpd).weights
        np.testing.assert_allclose(draws.mean_weights.mean(axis=0), pooled, atol=0.02)

    def test_without_data_sigma_follows_its_half_normal_prior(self):
        model = build_model(LpdMatrix(values=np.zeros((0, 2))), None, build_prior("basic"))
        cfg = SamplerConfig(chains=4, warmup=500, draws_per_chain=1000, seed=4)
        result = sample(lambda q: value_and_grad(model, q), np.zeros(model.layout.size), cfg)
        sigma = np.exp(result.flat_draws()[:, model.layout.slices()["log_sigma"]].ravel())
        assert sigma.mean() == pytest.approx(math.sqrt(2 / math.pi), abs=0.06)
        assert sigma.std() == pytest.approx(math.sqrt(1 - 2 / math.pi), abs=0.08)

    def test_small_cell_sits_closer_to_the_shared_mean(self):
        """A large cell far from the mean keeps its distance; a five-point cell is pulled in."""
        truth = np.array([[0.95, 0.05], [0.5, 0.5], [0.05, 0.95]])
        cfg = SamplerConfig(chains=2, warmup=400, draws_per_chain=400, max_leapfrog=32)
        wins = 0
        for rep in range(6):
            data = gen_cells(3, 2, [200, 5, 200], 1.0, seed=100 + rep, true_weights=truth)
            draws = fit_hierarchical(
                data.lpd, data.feats, build_prior("basic"), cfg.model_copy(update={"seed": rep}), check_diagnostics=False
            )
            mu = float(draws.theta[:, draws.model.layout.slices()["mu"]].mean())
            eta = draws.cell_eta[:, 0]
            wins += abs(eta[1] - mu) < abs(eta[0] - mu)
        assert wins >= 5
