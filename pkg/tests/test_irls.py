"""
Tests for the penalized IRLS engine: pooled GLM, Group-FE and RegFE.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.data_processing.grouped_data import build_dataset
from src.models.families import FamilySpec
from src.models.irls import (
    PenaltySpec,
    degenerate_groups,
    fit_fe,
    fit_glm,
    fit_regfe,
    model_based_covariance,
    stationarity_violation,
)
from src.utils.exceptions import DomainError, IdentifiabilityError
from tests.conftest import simulate_grouped


def _dummies(ds):
    return np.eye(ds.n_groups)[ds.group_index]


class TestPenaltySpec:
    """Penalty construction."""

    def test_scalar_penalty_parameters(self):
        pen = PenaltySpec.from_omega_sq(0.5, scale=2.0)
        assert pen.lambda_glm == pytest.approx(1.0)
        assert pen.lambda_lin == pytest.approx(4.0)
        assert_allclose(pen.block(1), [[4.0]])

    def test_unpenalized(self):
        pen = PenaltySpec.unpenalized()
        assert pen.is_zero
        assert_allclose(pen.block(2), np.zeros((2, 2)))

    def test_rejects_non_positive_definite(self):
        with pytest.raises(DomainError):
            PenaltySpec(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(DomainError):
            PenaltySpec.from_omega_sq(0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(DomainError):
            PenaltySpec.from_omega_sq(1.0).block(2)


class TestPooledGlm:
    """fit_glm ignores the groups."""

    def test_gaussian_is_least_squares(self, gaussian_data):
        fit = fit_glm(gaussian_data, FamilySpec.gaussian())
        expected, *_ = np.linalg.lstsq(gaussian_data.x, gaussian_data.y, rcond=None)
        assert fit.converged
        assert_allclose(fit.fixed_coef, expected, rtol=1e-8)
        resid = gaussian_data.y - gaussian_data.x @ expected
        assert fit.theta_hat == pytest.approx(np.mean(resid ** 2))

    @pytest.mark.parametrize("family", ["bernoulli", "poisson"])
    def test_score_equations(self, family):
        ds = simulate_grouped(family, seed=11)
        fam = FamilySpec.from_name(family)
        fit = fit_glm(ds, fam)
        mu = fam.link_inverse(ds.x @ fit.fixed_coef)
        assert fit.converged
        assert_allclose(ds.x.T @ (ds.y - mu), 0.0, atol=1e-6)

    def test_model_based_covariance_gaussian(self, gaussian_data):
        fit = fit_glm(gaussian_data, FamilySpec.gaussian())
        expected = fit.theta_hat * np.linalg.inv(gaussian_data.x.T @ gaussian_data.x)
        assert_allclose(model_based_covariance(fit), expected, rtol=1e-8)


class TestGroupFE:
    """Group fixed effects with a pinned reference group."""

    def test_gaussian_matches_within_estimator(self, gaussian_data):
        ds = gaussian_data
        fit = fit_fe(ds, FamilySpec.gaussian())
        x_within = ds.x[:, 1] - ds.group_means(ds.x[:, 1])[ds.group_index]
        y_within = ds.y - ds.group_means(ds.y)[ds.group_index]
        slope = (x_within @ y_within) / (x_within @ x_within)
        assert fit.converged
        assert fit.beta_hat[1] == pytest.approx(slope, rel=1e-8)

    def test_reference_group_is_pinned(self, gaussian_data):
        fit = fit_fe(gaussian_data, FamilySpec.gaussian())
        assert fit.reference_group == gaussian_data.group_labels[0]
        assert fit.gamma_hat[0, 0] == 0.0
        assert not fit.free_groups[0]
        assert fit.free_groups[1:].all()

    @pytest.mark.parametrize("family", ["bernoulli", "poisson"])
    def test_score_equations(self, family):
        ds = simulate_grouped(family, n_groups=8, group_size=25, seed=12, beta=(0.2, 0.6), group_sd=0.4)
        fam = FamilySpec.from_name(family)
        fit = fit_fe(ds, fam)
        assert fit.converged
        assert not fit.separated_groups
        resid = ds.y - fit.fitted_mean()
        assert_allclose(ds.x.T @ resid, 0.0, atol=1e-6)
        assert_allclose(ds.group_sums(resid)[1:], 0.0, atol=1e-6)

    def test_degenerate_groups_get_sentinels(self):
        rng = np.random.default_rng(13)
        groups = np.repeat(np.arange(5), 10)
        x = rng.normal(size=50)
        y = rng.binomial(1, 0.5, 50).astype(float)
        y[[10, 20, 40]] = 0.0
        y[[11, 21, 41]] = 1.0
        y[groups == 0] = 0.0
        y[groups == 3] = 1.0
        ds = build_dataset(y, np.column_stack([np.ones(50), x]), groups)
        fam = FamilySpec.bernoulli()
        assert degenerate_groups(ds, fam).tolist() == [-1, 0, 0, 1, 0]

        fit = fit_fe(ds, fam)
        assert fit.reference_group == 1
        assert fit.gamma_hat[0, 0] == -np.inf
        assert fit.gamma_hat[3, 0] == np.inf
        assert set(fit.separated_groups) == {0, 3}
        assert np.isfinite(fit.beta_hat).all()
        summary = fit.gamma_summary()
        assert summary["n_effects"] == 2
        assert summary["reference_group"] == 1

    def test_group_level_covariate_is_not_identified(self):
        rng = np.random.default_rng(14)
        groups = np.repeat(np.arange(6), 5)
        level = rng.normal(size=6)[groups]
        x = np.column_stack([np.ones(30), level])
        ds = build_dataset(rng.normal(size=30), x, groups)
        with pytest.raises(IdentifiabilityError):
            fit_fe(ds, FamilySpec.gaussian())

    def test_stationarity(self, poisson_data):
        fit = fit_fe(poisson_data, FamilySpec.poisson())
        assert stationarity_violation(fit) < 1e-6

    def test_random_slope_pinned_with_reference(self):
        rng = np.random.default_rng(15)
        groups = np.repeat(np.arange(6), 12)
        x = rng.normal(size=72)
        slopes = rng.normal(1.0, 0.3, 6)[groups]
        y = 0.5 + slopes * x + rng.normal(0.0, 0.5, 72)
        ds = build_dataset(y, np.column_stack([np.ones(72), x]), groups, z_spec=[1],
                           column_names=["(Intercept)", "x"])
        fit = fit_fe(ds, FamilySpec.gaussian())
        assert fit.diagnostics["reference_pinned_slopes"] == ["x"]
        assert_allclose(fit.gamma_hat[0], 0.0)
        slope, intercept = np.polyfit(x[:12], y[:12], 1)
        assert_allclose(fit.beta_hat, [intercept, slope], rtol=1e-6)


class TestRegFE:
    """Penalized group coefficients."""

    def test_gaussian_is_ridge(self, gaussian_data):
        ds = gaussian_data
        sigma_sq, omega_sq = 1.3, 0.6
        pen = PenaltySpec.from_omega_sq(omega_sq, scale=sigma_sq)
        fit = fit_regfe(ds, FamilySpec.gaussian(), pen)
        u = np.hstack([ds.x, _dummies(ds)])
        penalty = pen.penalty_matrix(2, ds.n_groups)
        assert_allclose(np.diag(penalty), [0.0, 0.0] + [sigma_sq / omega_sq] * ds.n_groups)
        expected = np.linalg.solve(u.T @ u + penalty, u.T @ ds.y)
        assert fit.converged
        assert_allclose(fit.fixed_coef, expected[:2], rtol=1e-8, atol=1e-10)
        assert_allclose(fit.gamma_hat[:, 0], expected[2:], rtol=1e-8, atol=1e-10)
        assert fit.theta_hat == sigma_sq

    def test_objective_never_decreases(self, bernoulli_data):
        fit = fit_regfe(bernoulli_data, FamilySpec.bernoulli(), PenaltySpec.from_omega_sq(0.5))
        trace = np.asarray(fit.objective_trace)
        assert fit.converged
        assert np.all(np.diff(trace) >= -1e-9 * (1.0 + np.abs(trace[:-1])))

    def test_stationarity(self, bernoulli_data):
        fit = fit_regfe(bernoulli_data, FamilySpec.bernoulli(), PenaltySpec.from_omega_sq(0.5))
        assert stationarity_violation(fit) < 1e-6

    def test_zero_penalty_pins_reference_like_fe(self, poisson_data):
        fam = FamilySpec.poisson()
        regfe = fit_regfe(poisson_data, fam, PenaltySpec.unpenalized())
        fe = fit_fe(poisson_data, fam)
        assert regfe.reference_group == fe.reference_group
        assert_allclose(regfe.fixed_coef, fe.fixed_coef, rtol=1e-8)

    def test_strong_penalty_shrinks_toward_pooled_fit(self, poisson_data):
        fam = FamilySpec.poisson()
        tight = fit_regfe(poisson_data, fam, PenaltySpec.from_omega_sq(1e-8))
        pooled = fit_glm(poisson_data, fam)
        assert np.max(np.abs(tight.gamma_hat)) < 1e-5
        assert_allclose(tight.fixed_coef, pooled.fixed_coef, atol=1e-4)

    def test_predict_mean_matches_fitted(self, bernoulli_data):
        fit = fit_regfe(bernoulli_data, FamilySpec.bernoulli(), PenaltySpec.from_omega_sq(0.5))
        predicted = fit.predict_mean(bernoulli_data.x, bernoulli_data.group_index)
        assert_allclose(predicted, fit.fitted_mean(), rtol=1e-12)
