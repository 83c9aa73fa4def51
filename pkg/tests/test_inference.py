"""
Tests for cluster-robust, model-based and bootstrap inference.
"""

from dataclasses import replace

import numpy as np
import pytest
from joblib import parallel_backend
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import norm

from src.data_processing.grouped_data import build_dataset
from src.inference import bootstrap
from src.inference.bootstrap import cluster_bootstrap, resample_codes
from src.inference.variance import (
    VarianceEstimate,
    VarianceMethod,
    check_compatible,
    crse_fe,
    crse_regfe,
    model_based,
    sandwich,
    small_sample_correction,
)
from src.models.estimators import fit_estimator
from src.models.families import FamilySpec
from src.models.irls import PenaltySpec, fit_fe, fit_glm, fit_regfe
from src.utils.exceptions import DataValidationError, IncompatibleOptionsError
from tests.conftest import simulate_grouped


class TestSmallSampleCorrection:
    """Finite-sample constants."""

    def test_values(self):
        assert small_sample_correction("none", 10, 100, 3) == 1.0
        assert small_sample_correction("g-over-g-1", 10, 100, 3) == pytest.approx(10 / 9)
        assert small_sample_correction("stata", 10, 100, 3) == pytest.approx(10 / 9 * 99 / 97)

    def test_unknown_correction(self):
        with pytest.raises(IncompatibleOptionsError):
            small_sample_correction("hc3", 10, 100, 3)


class TestCrse:
    """Cluster-robust sandwich."""

    @pytest.mark.parametrize("family", ["gaussian", "bernoulli", "poisson"])
    @pytest.mark.parametrize("seed", range(20))
    def test_fe_sandwich_equals_unpenalized_regfe_sandwich(self, family, seed):
        ds = simulate_grouped(family, n_groups=8, group_size=12, seed=300 + seed, beta=(0.1, 0.5), group_sd=0.5)
        fit = fit_fe(ds, FamilySpec.from_name(family))
        by_fe = crse_fe(fit, c=1.0)
        by_regfe = crse_regfe(fit, c=1.0)
        assert_allclose(by_fe.covariance, by_regfe.covariance, rtol=1e-8, atol=1e-14)

    def test_c_scales_covariance(self, poisson_data):
        fit = fit_regfe(poisson_data, FamilySpec.poisson(), PenaltySpec.from_omega_sq(0.4))
        one = crse_regfe(fit, c=1.0)
        two = crse_regfe(fit, c=2.0)
        assert_allclose(two.covariance, 2.0 * one.covariance, rtol=1e-12)
        assert_allclose(two.standard_errors(), np.sqrt(2.0) * one.standard_errors(), rtol=1e-12)

    def test_default_correction_is_g_over_g_minus_1(self, poisson_data):
        fit = fit_fe(poisson_data, FamilySpec.poisson())
        estimate = sandwich(fit)
        g = poisson_data.n_groups
        assert estimate.method == VarianceMethod.CRSE_FE
        assert estimate.c == pytest.approx(g / (g - 1))

    def test_gaussian_glm_matches_textbook_formula(self, gaussian_data):
        ds = gaussian_data
        fit = fit_glm(ds, FamilySpec.gaussian())
        resid = ds.y - ds.x @ fit.fixed_coef
        bread = np.linalg.inv(ds.x.T @ ds.x)
        scores = ds.group_sums(ds.x * resid[:, None])
        expected = bread @ scores.T @ scores @ bread
        assert_allclose(crse_regfe(fit, c=1.0).covariance, expected, rtol=1e-8)

    def test_gaussian_bias_corrected_regfe_matches_ridge_sandwich(self):
        ds = simulate_grouped("gaussian", n_groups=15, group_size=6, seed=32, correlated=True)
        fit = fit_estimator("bc-regfe", ds, FamilySpec.gaussian())
        design = fit.design
        u = np.hstack([design.x, np.eye(design.n_groups)[design.group_index]])
        k = design.n_fixed
        penalty = np.zeros(u.shape[1])
        penalty[k:] = fit.penalty.block(1)[0, 0]
        resid = design.y - u @ np.concatenate([fit.fixed_coef, fit.gamma_hat[:, 0]])
        projector = np.linalg.solve(u.T @ u + np.diag(penalty), u.T)
        expected = np.zeros((k, k))
        for g in range(design.n_groups):
            rows = design.group_slice(g)
            q = projector[:k, rows] @ resid[rows]
            expected += np.outer(q, q)
        assert_allclose(crse_regfe(fit, c=1.0).covariance, expected, rtol=1e-8, atol=1e-14)

    def test_separated_groups_are_left_out(self):
        rng = np.random.default_rng(31)
        groups = np.repeat(np.arange(6), 15)
        x = rng.normal(size=90)
        y = rng.binomial(1, 0.5, 90).astype(float)
        y[groups == 2] = 1.0
        ds = build_dataset(y, np.column_stack([np.ones(90), x]), groups)
        fit = fit_fe(ds, FamilySpec.bernoulli())
        estimate = sandwich(fit)
        assert np.all(np.isfinite(estimate.standard_errors()))

    def test_mlm_rejected(self, bernoulli_data):
        with pytest.raises(IncompatibleOptionsError):
            check_compatible("ri-mlm", "crse")
        fit = fit_estimator("ri-mlm", bernoulli_data, FamilySpec.bernoulli())
        with pytest.raises(IncompatibleOptionsError):
            sandwich(fit)

    def test_crse_fe_needs_unpenalized_fit(self, poisson_data):
        fit = fit_regfe(poisson_data, FamilySpec.poisson(), PenaltySpec.from_omega_sq(0.4))
        with pytest.raises(IncompatibleOptionsError):
            crse_fe(fit)


class TestModelBased:
    """Default variance."""

    def test_mle_hessian_for_mlm(self, bernoulli_data):
        fit = fit_estimator("ri-mlm", bernoulli_data, FamilySpec.bernoulli())
        estimate = model_based(fit)
        assert estimate.method == VarianceMethod.MLE_HESSIAN
        assert np.all(estimate.standard_errors() > 0)

    def test_wald_interval(self, gaussian_data):
        fit = fit_glm(gaussian_data, FamilySpec.gaussian())
        estimate = replace(model_based(fit), level=0.9)
        lower, upper = estimate.confidence_intervals()
        se = estimate.standard_errors()
        assert_allclose(upper - lower, 2.0 * norm.ppf(0.95) * se)
        assert estimate.covers(1, float(fit.fixed_coef[1]))

    def test_replicate_standard_errors(self):
        replicates = np.array([[1.0, 2.0], [3.0, 2.0], [2.0, 5.0]])
        estimate = VarianceEstimate(VarianceMethod.CLUSTER_BOOTSTRAP, ("a", "b"), np.array([2.0, 3.0]),
                                    replicates=replicates)
        assert_allclose(estimate.standard_errors(), replicates.std(axis=0, ddof=1))


class TestClusterBootstrap:
    """Percentile cluster bootstrap."""

    def test_resample_codes_are_reproducible(self):
        first = resample_codes(20, 7, 3)
        assert_array_equal(first, resample_codes(20, 7, 3))
        assert first.min() >= 0 and first.max() < 20
        assert not np.array_equal(first, resample_codes(20, 7, 4))

    def test_same_seed_same_replicates(self, poisson_data):
        fam = FamilySpec.poisson()
        first = cluster_bootstrap(poisson_data, fam, "fe", n_replicates=50, seed=5)
        second = cluster_bootstrap(poisson_data, fam, "fe", n_replicates=50, seed=5)
        assert_array_equal(first.replicates, second.replicates)
        assert_array_equal(first.ci_lower, second.ci_lower)

    def test_worker_count_does_not_change_results(self, poisson_data):
        fam = FamilySpec.poisson()
        serial = cluster_bootstrap(poisson_data, fam, "glm", n_replicates=50, seed=9, n_jobs=1)
        with parallel_backend("threading"):
            threaded = cluster_bootstrap(poisson_data, fam, "glm", n_replicates=50, seed=9, n_jobs=3)
        assert_array_equal(serial.replicates, threaded.replicates)

    def test_affine_equivariance(self, gaussian_data):
        ds = gaussian_data
        shifted = build_dataset(3.0 + 2.0 * ds.y, ds.x, ds.group_labels[ds.group_index])
        fam = FamilySpec.gaussian()
        base = cluster_bootstrap(ds, fam, "glm", n_replicates=50, seed=11)
        moved = cluster_bootstrap(shifted, fam, "glm", n_replicates=50, seed=11)
        assert_allclose(moved.replicates[:, 0], 3.0 + 2.0 * base.replicates[:, 0], rtol=1e-8, atol=1e-10)
        assert_allclose(moved.replicates[:, 1], 2.0 * base.replicates[:, 1], rtol=1e-8, atol=1e-10)

    def test_percentile_interval(self, poisson_data):
        estimate = cluster_bootstrap(poisson_data, FamilySpec.poisson(), "glm", n_replicates=60, seed=2, level=0.8)
        expected = np.quantile(estimate.replicates, [0.1, 0.9], axis=0)
        assert_allclose(estimate.ci_lower, expected[0])
        assert_allclose(estimate.ci_upper, expected[1])
        assert estimate.metadata()["n_replicates"] == 60
        assert estimate.metadata()["seed"] == 2

    def test_single_group_rejected(self):
        ds = build_dataset([1.0, 2.0, 3.0], np.column_stack([np.ones(3), [0.1, 0.5, 0.9]]), [0, 0, 0])
        with pytest.raises(DataValidationError):
            cluster_bootstrap(ds, FamilySpec.gaussian(), "glm", n_replicates=50, seed=1)

    @pytest.mark.parametrize("n_replicates", [1, 49])
    def test_needs_fifty_replicates(self, poisson_data, n_replicates):
        with pytest.raises(IncompatibleOptionsError):
            cluster_bootstrap(poisson_data, FamilySpec.poisson(), "glm", n_replicates=n_replicates, seed=1)

    def test_workers_default_to_all_cores(self, poisson_data, monkeypatch):
        seen = {}
        real_parallel = bootstrap.Parallel

        def recording_parallel(n_jobs=None, **kwargs):
            seen["n_jobs"] = n_jobs
            return real_parallel(n_jobs=1, **kwargs)

        monkeypatch.setattr(bootstrap, "Parallel", recording_parallel)
        cluster_bootstrap(poisson_data, FamilySpec.poisson(), "glm", n_replicates=50, seed=3)
        assert seen["n_jobs"] == -1
