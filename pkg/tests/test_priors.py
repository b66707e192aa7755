import math

import numpy as np
import pytest
from scipy import stats

from app.schemas import KernelConfig, PriorConfig
from app.services.core import FeatureSet, InputValidationError, LpdMatrix
from app.services.hier import build_model, grad_log_posterior, log_posterior, value_and_grad
from app.services.priors import (
    KernelSpec,
    build_prior,
    effective_tau_sigma,
    half_normal_on_log,
    inv_gamma_on_log,
    normal_logpdf,
    prior_from_config,
    prior_to_config,
)

PRIOR_CASES = [
    ("basic", {}),
    ("grouped", {}),
    ("feature_decomposed", {}),
    ("correlated", {"omega": [[1.0, 0.4, 0.1], [0.4, 1.0, 0.3], [0.1, 0.3, 1.0]]}),
    ("gp", {"kernel": KernelSpec()}),
    ("gp", {"kernel": KernelSpec(kind="zero_one")}),
]


def finite_difference(model, theta, *, jacobian=True, h=1e-6):
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (value_and_grad(model, up, jacobian=jacobian)[0] - value_and_grad(model, down, jacobian=jacobian)[0]) / (2 * h)
    return grad


@pytest.fixture
def cell_feature_data(rng):
    n = 24
    lpd = LpdMatrix(values=rng.normal(loc=-1.0, size=(n, 3)))
    feats = FeatureSet(
        cell_index=np.repeat(np.arange(3), n // 3),
        features=rng.normal(size=(n, 2)),
        group_of_feature=np.array([0, 1]),
        cell_labels=("a", "b", "c"),
    )
    return lpd, feats


class TestBuildPrior:
    def test_unknown_kind(self):
        with pytest.raises(InputValidationError, match="unknown prior kind"):
            build_prior("horseshoe")

    def test_scales_must_be_positive(self):
        with pytest.raises(InputValidationError):
            build_prior("basic", tau_mu=0.0)
        with pytest.raises(InputValidationError):
            build_prior("basic", tau_sigma=[1.0, -2.0])

    def test_omega_is_checked(self):
        with pytest.raises(InputValidationError, match="only applies"):
            build_prior("basic", omega=np.eye(2))
        with pytest.raises(InputValidationError, match="symmetric"):
            build_prior("correlated", omega=[[1.0, 0.2], [0.3, 1.0]])
        with pytest.raises(InputValidationError, match="positive definite"):
            build_prior("correlated", omega=[[1.0, 1.0], [1.0, 1.0]])

    def test_gp_gets_a_default_kernel(self):
        prior = build_prior("gp")
        assert prior.kernel == KernelSpec()
        assert build_prior("gp", kernel=KernelConfig(kind="zero_one")).kernel.kind == "zero_one"

    def test_config_round_trip(self):
        cfg = PriorConfig(kind="grouped", tau_mu=2.0, tau_sigma=[0.5, 1.5], sample_mu0=True)
        assert prior_to_config(prior_from_config(cfg)) == cfg


class TestEffectiveScales:
    def test_single_scale_broadcasts_to_groups(self):
        prior = build_prior("grouped", tau_sigma=0.7)
        np.testing.assert_allclose(effective_tau_sigma(prior, 3, 5), [0.7, 0.7, 0.7])

    def test_feature_count_scaling(self):
        prior = build_prior("basic", tau_sigma=2.0, scale_by_features=True)
        np.testing.assert_allclose(effective_tau_sigma(prior, 1, 4), [1.0])

    def test_wrong_group_count(self):
        prior = build_prior("grouped", tau_sigma=[1.0, 2.0])
        with pytest.raises(InputValidationError):
            effective_tau_sigma(prior, 3, 6)


class TestDensityTerms:
    def test_normal_matches_scipy(self):
        x = np.array([-1.0, 0.2, 2.5])
        value, grad = normal_logpdf(x, 0.5, 2.0)
        assert value == pytest.approx(stats.norm.logpdf(x, 0.5, 2.0).sum())
        np.testing.assert_allclose(grad, -(x - 0.5) / 4.0)

    def test_half_normal_without_jacobian_is_the_density_of_s(self):
        log_s = np.log(np.array([0.3, 1.0, 2.2]))
        value, _ = half_normal_on_log(log_s, 1.5, jacobian=False)
        assert value == pytest.approx(stats.halfnorm.logpdf(np.exp(log_s), scale=1.5).sum())
        with_jac, _ = half_normal_on_log(log_s, 1.5)
        assert with_jac - value == pytest.approx(log_s.sum())

    def test_inverse_gamma_matches_scipy(self):
        log_x = np.log(np.array([0.4, 1.3]))
        value, _ = inv_gamma_on_log(log_x, 2.0, 1.0, jacobian=False)
        assert value == pytest.approx(stats.invgamma.logpdf(np.exp(log_x), 2.0, scale=1.0).sum())


class TestPosteriorGradients:
    """Analytic gradients of the log posterior against central finite differences."""

    @pytest.mark.parametrize("centered", [False, True])
    @pytest.mark.parametrize("kind,extra", PRIOR_CASES)
    def test_all_prior_families(self, cell_feature_data, rng, kind, extra, centered):
        lpd, feats = cell_feature_data
        if kind == "gp" and extra["kernel"].kind == "zero_one":
            feats = FeatureSet(cell_index=feats.cell_index, cell_labels=feats.cell_labels)
        elif kind == "gp":
            feats = FeatureSet(features=feats.features)
        if kind == "correlated":
            feats = FeatureSet(cell_index=feats.cell_index, features=feats.features, cell_labels=feats.cell_labels)
        prior = build_prior(kind, centered=centered, **extra)
        model = build_model(lpd, feats, prior)
        theta = rng.normal(scale=0.4, size=model.layout.size)
        _, grad = value_and_grad(model, theta)
        np.testing.assert_allclose(grad, finite_difference(model, theta), rtol=1e-4, atol=1e-5)

    @pytest.mark.parametrize("kind", ["basic", "feature_decomposed"])
    def test_sampled_global_mean(self, cell_feature_data, rng, kind):
        lpd, feats = cell_feature_data
        prior = build_prior(kind, sample_mu0=True, tau_mu=1.5)
        model = build_model(lpd, feats, prior)
        assert "mu0" in model.layout.slices()
        theta = rng.normal(scale=0.4, size=model.layout.size)
        _, grad = value_and_grad(model, theta)
        np.testing.assert_allclose(grad, finite_difference(model, theta), rtol=1e-4, atol=1e-5)

    def test_gp_on_continuous_inputs(self, rng):
        x = np.linspace(-2.0, 2.0, 5)
        lpd = LpdMatrix(values=rng.normal(size=(5, 2)))
        model = build_model(lpd, FeatureSet(features=x.reshape(-1, 1)), build_prior("gp"))
        theta = rng.normal(scale=0.3, size=model.layout.size)
        _, grad = value_and_grad(model, theta)
        np.testing.assert_allclose(grad, finite_difference(model, theta), rtol=1e-4, atol=1e-5)

    def test_without_jacobian(self, cell_feature_data, rng):
        lpd, feats = cell_feature_data
        model = build_model(lpd, feats, build_prior("grouped"))
        theta = rng.normal(scale=0.4, size=model.layout.size)
        _, grad = value_and_grad(model, theta, jacobian=False)
        np.testing.assert_allclose(grad, finite_difference(model, theta, jacobian=False), rtol=1e-4, atol=1e-5)

    def test_parameter_interface_agrees_with_packed_form(self, cell_feature_data, rng):
        lpd, feats = cell_feature_data
        prior = build_prior("basic")
        model = build_model(lpd, feats, prior)
        theta = rng.normal(size=model.layout.size)
        params = model.layout.unpack(theta)
        value, grad = value_and_grad(model, theta)
        assert log_posterior(params, lpd, feats, prior) == pytest.approx(value)
        np.testing.assert_allclose(model.layout.pack(grad_log_posterior(params, lpd, feats, prior)), grad)


def test_constant_shift_of_all_densities_moves_only_the_level(rng):
    lpd = LpdMatrix(values=rng.normal(size=(10, 2)))
    moved = LpdMatrix(values=lpd.values + 3.0)
    model = build_model(lpd, None, build_prior("basic"))
    theta = np.zeros(model.layout.size)
    a = value_and_grad(model, theta)[0]
    b = value_and_grad(build_model(moved, None, build_prior("basic")), theta)[0]
    assert b - a == pytest.approx(30.0)
    assert math.isfinite(a)


def cells_only(feats):
    return FeatureSet(cell_index=feats.cell_index, cell_labels=feats.cell_labels)


class TestPriorEquivalences:
    def test_no_data_leaves_the_log_prior(self, rng):
        lpd = LpdMatrix(values=np.zeros((0, 2)))
        prior = build_prior("basic")
        model = build_model(lpd, None, prior)
        theta = rng.normal(size=model.layout.size)
        params = model.layout.unpack(theta)
        sigma = float(np.exp(params.log_sigma[0]))
        expected = (
            stats.norm.logpdf(params.mu[0], 0.0, 1.0)
            + stats.halfnorm.logpdf(sigma, scale=1.0)
            + params.log_sigma[0]
        )
        assert log_posterior(params, lpd, None, prior) == pytest.approx(expected, rel=1e-12)
        at_zero = log_posterior(model.layout.zeros(), lpd, None, prior)
        assert at_zero == pytest.approx(-1.64473, abs=1e-5)

    def test_density_grows_as_sigma_collapses_onto_the_mean(self, cell_feature_data):
        lpd, feats = cell_feature_data
        feats = cells_only(feats)
        prior = build_prior("basic", centered=True)
        params = build_model(lpd, feats, prior).layout.zeros()
        values = []
        for log_sigma in (0.0, -5.0, -10.0, -20.0, -40.0):
            params.log_sigma[:] = log_sigma
            values.append(log_posterior(params, lpd, feats, prior, jacobian=False))
        assert np.all(np.diff(values) > 0)
        # three cells times two free coordinates, each gaining 20 in log sigma
        assert values[-1] - values[-2] == pytest.approx(6 * 20.0, rel=1e-6)

    @pytest.mark.parametrize("centered", [False, True])
    def test_identity_correlation_is_the_basic_prior(self, cell_feature_data, rng, centered):
        lpd, feats = cell_feature_data
        basic = build_model(lpd, feats, build_prior("basic", centered=centered))
        correlated = build_model(
            lpd, feats, build_prior("correlated", omega=np.eye(3), centered=centered)
        )
        assert correlated.layout.size == basic.layout.size
        for _ in range(3):
            theta = rng.normal(scale=0.5, size=basic.layout.size)
            assert value_and_grad(correlated, theta)[0] == pytest.approx(value_and_grad(basic, theta)[0], rel=1e-12)

    def test_a_single_group_is_the_basic_prior(self, cell_feature_data, rng):
        lpd, feats = cell_feature_data
        feats = cells_only(feats)
        basic = build_model(lpd, feats, build_prior("basic"))
        grouped = build_model(lpd, feats, build_prior("grouped"))
        assert grouped.n_groups == 1
        theta = rng.normal(scale=0.5, size=basic.layout.size)
        b_value, b_grad = value_and_grad(basic, theta)
        g_value, g_grad = value_and_grad(grouped, theta)
        assert g_value == pytest.approx(b_value, rel=1e-12)
        np.testing.assert_allclose(g_grad, b_grad, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("centered", [False, True])
    def test_zero_one_kernel_is_the_discrete_basic_prior(self, cell_feature_data, rng, centered):
        lpd, feats = cell_feature_data
        feats = cells_only(feats)
        basic = build_model(lpd, feats, build_prior("basic", centered=centered))
        gp = build_model(lpd, feats, build_prior("gp", kernel=KernelSpec(kind="zero_one"), centered=centered))
        assert gp.layout.size == basic.layout.size
        for _ in range(3):
            theta = rng.normal(scale=0.5, size=basic.layout.size)
            assert value_and_grad(gp, theta)[0] == pytest.approx(value_and_grad(basic, theta)[0], abs=1e-5)


class TestGpInputs:
    def test_distance_kernel_on_cell_codes_is_rejected(self, cell_feature_data):
        lpd, feats = cell_feature_data
        with pytest.raises(InputValidationError, match="zero_one"):
            build_model(lpd, cells_only(feats), build_prior("gp"))

    def test_zero_one_kernel_ignores_label_order(self, cell_feature_data, rng):
        lpd, feats = cell_feature_data
        prior = build_prior("gp", kernel=KernelSpec(kind="zero_one"), centered=True)
        original = build_model(lpd, cells_only(feats), prior)
        relabel = np.array([2, 0, 1])
        swapped = FeatureSet(cell_index=relabel[feats.cell_index], cell_labels=("c", "a", "b"))
        moved = build_model(lpd, swapped, prior)
        params = original.layout.unpack(rng.normal(scale=0.5, size=original.layout.size))
        permuted = moved.layout.zeros()
        permuted.alpha[relabel] = params.alpha
        permuted.mu[:] = params.mu
        permuted.log_sigma[:] = params.log_sigma
        a = value_and_grad(original, original.layout.pack(params))[0]
        b = value_and_grad(moved, moved.layout.pack(permuted))[0]
        assert b == pytest.approx(a, rel=1e-12)
