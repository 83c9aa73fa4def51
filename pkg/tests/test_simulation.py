"""
Tests for the data-generating processes, the experiment runner and the presets.
"""

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.cli.schemas import ExperimentConfig, load_experiment
from src.simulation.dgp import DgpKind, DgpSpec, StreamRole, ar1_errors, generate, generate_test
from src.simulation.experiment import (
    pool_metrics,
    run_experiment,
    run_group_effect_comparison,
    summarize,
    test_error_rate as error_rate,
)
from src.simulation.presets import PRESETS, preset
from src.models.estimators import fit_estimator
from src.utils.exceptions import ConfigError


class TestDgpSpec:
    """Grid cell validation."""

    def test_defaults(self):
        spec = DgpSpec(DgpKind.DGP1, 15, 5, seed=1)
        assert spec.beta == (1.0, 1.0)
        assert spec.normal_param == "variance"
        assert spec.family.name == "bernoulli"
        assert spec.target == "x"

    def test_random_slope_layout(self):
        spec = DgpSpec("random-slope", 10, 5, seed=1)
        assert spec.column_names == ("(Intercept)", "x1", "x2")
        assert spec.z_columns == ("x2",)
        sim = generate(spec, 0)
        assert sim.dataset.n_random == 2

    def test_needs_two_groups(self):
        with pytest.raises(ConfigError):
            DgpSpec(DgpKind.DGP1, 1, 5)

    def test_coefficient_count(self):
        with pytest.raises(ConfigError):
            DgpSpec(DgpKind.DGP1, 10, 5, beta=(1.0, 1.0, 1.0))

    def test_normal_param_checked(self):
        with pytest.raises(ConfigError):
            DgpSpec(DgpKind.DGP1, 10, 5, normal_param="precision")


class TestGenerate:
    """Counter-based streams and the process recipes."""

    def test_replicate_is_reproducible(self):
        spec = DgpSpec(DgpKind.DGP1, 15, 5, seed=42)
        first, second = generate(spec, 3), generate(spec, 3)
        assert_array_equal(first.dataset.y, second.dataset.y)
        assert_array_equal(first.dataset.x, second.dataset.x)
        assert not np.array_equal(first.dataset.x, generate(spec, 4).dataset.x)

    def test_streams_do_not_depend_on_other_cells(self):
        small = DgpSpec(DgpKind.POISSON_LOG, 10, 5, seed=42)
        other = DgpSpec(DgpKind.POISSON_LOG, 10, 6, seed=42)
        assert not np.array_equal(generate(small, 0).latent["w"], generate(other, 0).latent["w"])
        draw = small.generator(0, StreamRole.LATENT).standard_normal(3)
        assert_array_equal(draw, small.generator(0, StreamRole.LATENT).standard_normal(3))

    def test_test_set_shares_latent_effects(self):
        train = generate(DgpSpec(DgpKind.DGP1, 20, 5, seed=8), 0)
        test = generate_test(train)
        assert test.latent is train.latent
        assert test.dataset.n_obs == train.dataset.n_obs
        assert not np.array_equal(test.dataset.x, train.dataset.x)

    def test_dgp1_covariate_tracks_group_effect(self):
        sim = generate(DgpSpec(DgpKind.DGP1, 5000, 5, seed=3), 0)
        x = sim.dataset.x[:, 1]
        w1 = np.repeat(sim.latent["w1"], 5)
        assert np.corrcoef(x, w1)[0, 1] == pytest.approx(1.0 / np.sqrt(1.5), abs=0.02)

    @pytest.mark.parametrize("normal_param,expected_sd", [("variance", np.sqrt(0.5)), ("sd", 0.5)])
    def test_normal_param_reading(self, normal_param, expected_sd):
        sim = generate(DgpSpec(DgpKind.LOGISTIC_RI, 400, 25, seed=4, normal_param=normal_param), 0)
        assert sim.dataset.x[:, 1].std() == pytest.approx(expected_sd, rel=0.03)

    @pytest.mark.parametrize("lag", [1, 2, 3])
    def test_ar1_errors(self, lag):
        rng = np.random.default_rng(5)
        errors = ar1_errors(rng, 4000, 25, variance=0.5)
        autocorrelation = np.mean(errors[:, lag:] * errors[:, :-lag]) / np.mean(errors ** 2)
        assert autocorrelation == pytest.approx(0.75 ** lag, abs=0.02)
        assert errors.var() == pytest.approx(0.5, rel=0.03)

    def test_poisson_outcomes_are_counts(self):
        sim = generate(DgpSpec(DgpKind.DGP2, 10, 25, seed=6), 0)
        y = sim.dataset.y
        assert np.all(y >= 0) and np.all(y == np.floor(y))

    def test_group_intercepts(self):
        sim = generate(DgpSpec(DgpKind.DGP1, 10, 5, seed=7), 0)
        assert_allclose(sim.group_intercepts(), sim.latent["w1"] + sim.latent["w2"])


class TestMetrics:
    """Bias, RMSE and coverage from replicate rows."""

    @staticmethod
    def _rows(errors, covered, failed=None):
        n = len(errors)
        failed = failed or [False] * n
        return pd.DataFrame({
            "dgp": "dgp1", "n_groups": 15, "group_size": 5, "estimator": "fe", "inference": "crse",
            "replicate": range(n), "truth": 1.0, "estimate": [1.0 + e for e in errors], "error": errors,
            "covered": covered, "ci_width": [0.5] * n, "test_error": np.nan, "failed": failed,
        })

    def test_single_replicate(self):
        metrics = summarize(self._rows([0.3], [1.0]))
        row = metrics.iloc[0]
        assert row["bias"] == pytest.approx(0.3)
        assert row["rmse"] == pytest.approx(0.3)
        assert np.isnan(row["mc_se_bias"])
        assert row["coverage"] == 1.0
        assert row["label"] == "Group-FE"

    def test_known_values(self):
        errors = [0.1, -0.3, 0.5, 0.3]
        metrics = summarize(self._rows(errors, [1.0, 0.0, 1.0, 1.0]))
        row = metrics.iloc[0]
        e = np.array(errors)
        assert row["bias"] == pytest.approx(e.mean())
        assert row["rmse"] == pytest.approx(np.sqrt(np.mean(e ** 2)))
        assert row["mc_se_bias"] == pytest.approx(e.std(ddof=1) / 2.0)
        assert row["coverage"] == pytest.approx(0.75)
        assert row["mc_se_coverage"] == pytest.approx(np.sqrt(0.75 * 0.25 / 4))
        assert row["mean_ci_width"] == pytest.approx(0.5)

    def test_failures_are_counted_not_averaged(self):
        rows = self._rows([0.2, 0.0, 0.4], [1.0, np.nan, 0.0], failed=[False, True, False])
        rows.loc[1, ["estimate", "error"]] = np.nan
        row = summarize(rows).iloc[0]
        assert row["n_failed"] == 1
        assert row["bias"] == pytest.approx(0.3)
        assert row["failure_share"] == pytest.approx(1 / 3)
        assert bool(row["flagged"])

    def test_pooling_halves_equals_whole(self):
        rng = np.random.default_rng(9)
        errors = rng.normal(0.1, 0.4, 40).tolist()
        covered = rng.integers(0, 2, 40).astype(float).tolist()
        rows = self._rows(errors, covered)
        whole = summarize(rows)
        pooled = pool_metrics([summarize(rows.iloc[:15]), summarize(rows.iloc[15:])])
        for col in ("bias", "rmse", "mc_se_bias", "mc_se_rmse", "coverage", "mean_ci_width"):
            assert pooled[col].iloc[0] == pytest.approx(whole[col].iloc[0], rel=1e-10)
        assert np.isnan(pooled["median_estimate"].iloc[0])


class TestRunExperiment:
    """End-to-end experiment runs on tiny grids."""

    CONFIG = {"dgp": "dgp1", "grid": [{"G": 15, "n": 5}], "estimators": ["glm", "fe"],
              "inference": ["default", "crse"], "M": 3, "seed": 17}

    def test_metrics_layout(self):
        result = run_experiment(load_experiment(self.CONFIG), n_jobs=1)
        assert len(result.metrics) == 4
        assert len(result.replicates) == 12
        assert set(result.metrics["label"]) == {"GLM", "Group-FE"}
        assert {"bias", "rmse", "coverage", "mc_se_bias", "failure_share"} <= set(result.metrics.columns)

    def test_repeat_runs_are_identical(self):
        first = run_experiment(load_experiment(self.CONFIG), n_jobs=1)
        second = run_experiment(load_experiment(self.CONFIG), n_jobs=1)
        pd.testing.assert_frame_equal(first.metrics, second.metrics)
        pd.testing.assert_frame_equal(first.replicates, second.replicates)

    def test_converged_fits_pass_score_check(self):
        replicates = run_experiment(load_experiment(self.CONFIG), n_jobs=1).replicates
        fitted = replicates[~replicates["failed"]]
        assert len(fitted) > 0
        assert (fitted["stationarity"] < 1e-6).all()

    def test_mlm_fits_record_score_check(self):
        config = load_experiment({"dgp": "logistic-ri", "grid": [{"G": 10, "n": 20}],
                                  "estimators": ["ri-mlm", "bc-ri"], "M": 2, "seed": 5})
        replicates = run_experiment(config, n_jobs=1).replicates
        fitted = replicates[~replicates["failed"]]
        assert set(fitted["estimator"]) == {"ri-mlm", "bc-ri"}
        assert (fitted["stationarity"] < 1e-6).all()

    def test_estimates_shared_across_inference_methods(self):
        replicates = run_experiment(load_experiment(self.CONFIG), n_jobs=1).replicates
        fe = replicates[replicates["estimator"] == "fe"]
        by_inference = fe.pivot(index="replicate", columns="inference", values="estimate")
        assert_allclose(by_inference["default"], by_inference["crse"])

    def test_test_error_rate(self):
        spec = DgpSpec(DgpKind.DGP1, 20, 10, seed=12)
        sim = generate(spec, 0)
        fit = fit_estimator("fe", sim.dataset, sim.family)
        rate = error_rate(sim.dataset, generate_test(sim).dataset, fit)
        assert 0.0 <= rate < 0.5

    def test_group_effect_comparison(self):
        config = load_experiment({"dgp": "logistic-ri", "grid": [{"G": 10, "n": 20}], "output": "group-effects",
                                  "M": 1, "seed": 3})
        frame = run_group_effect_comparison(config)
        assert set(frame["estimator"]) == {"RI", "RegFE", "Group-FE"}
        assert len(frame) == 30
        for _, part in frame.groupby("estimator"):
            assert part["effect"].mean() == pytest.approx(0.0, abs=1e-10)


class TestPresets:
    """Embedded experiment documents."""

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_every_preset_validates(self, name):
        config = load_experiment(preset(name))
        assert isinstance(config, ExperimentConfig)
        assert config.name == name

    def test_fast_mode_cuts_replicates(self):
        fast = load_experiment(preset("figure6", fast=True))
        assert fast.n_replicates <= 25
        assert fast.n_bootstrap == 50
        assert [m.key for m in fast.method_list()] == ["ri-mlm/default", "ri-mlm/bootstrap", "fe/crse", "regfe/crse"]

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("table9")

    def test_crse_pairs_skip_mlm(self):
        config = load_experiment({"dgp": "dgp1", "grid": [{"G": 15, "n": 5}], "estimators": ["ri-mlm", "fe"],
                                  "inference": ["default", "crse"]})
        assert [m.key for m in config.method_list()] == ["ri-mlm/default", "fe/default", "fe/crse"]

    def test_explicit_mlm_crse_pair_rejected(self):
        with pytest.raises(ConfigError):
            load_experiment({"dgp": "dgp1", "grid": [{"G": 15, "n": 5}],
                             "methods": [{"estimator": "bc-ri", "inference": "crse"}]})


@pytest.mark.slow
class TestMonteCarloAcceptance:
    """Reduced-replicate Monte Carlo runs checked against reference bias, RMSE, coverage and prediction values."""

    REFERENCE_BIAS = {
        5: {"GLM": 0.523, "RI": 0.684, "Group-FE": 0.344, "bcRI": 0.044, "bcRegFE": -0.032},
        25: {"GLM": 0.506, "RI": 0.396, "Group-FE": 0.048, "bcRI": 0.004, "bcRegFE": -0.026},
        50: {"GLM": 0.502, "RI": 0.248, "Group-FE": 0.022, "bcRI": 0.000, "bcRegFE": -0.018},
    }
    REFERENCE_RMSE_N5 = {"RI": 0.739, "Group-FE": 0.663, "bcRI": 0.422, "bcRegFE": 0.386}

    @staticmethod
    def _assert_stationary(result):
        fitted = result.replicates[~result.replicates["failed"]]
        assert (fitted["stationarity"] <= 1e-6).all()

    @pytest.fixture(scope="class")
    def dgp1_runs(self):
        config = load_experiment({"dgp": "dgp1", "grid": [{"G": 50, "n": n} for n in (5, 25, 50)],
                                  "estimators": ["glm", "ri-mlm", "fe", "bc-ri", "bc-regfe"], "M": 500, "seed": 1})
        return run_experiment(config)

    @pytest.mark.parametrize("group_size", [5, 25, 50])
    def test_bias_at_g50(self, dgp1_runs, group_size):
        metrics = dgp1_runs.metrics
        cell = metrics[metrics["group_size"] == group_size].set_index("label")
        for label, value in self.REFERENCE_BIAS[group_size].items():
            tolerance = max(0.04, 3.0 * cell.loc[label, "mc_se_bias"])
            assert cell.loc[label, "bias"] == pytest.approx(value, abs=tolerance)

    def test_rmse_at_g50_n5(self, dgp1_runs):
        metrics = dgp1_runs.metrics
        cell = metrics[metrics["group_size"] == 5].set_index("label")
        for label, value in self.REFERENCE_RMSE_N5.items():
            assert cell.loc[label, "rmse"] == pytest.approx(value, abs=0.06)
        assert cell.loc["bcRI", "rmse"] < cell.loc["Group-FE", "rmse"]

    def test_bias_runs_pass_score_check(self, dgp1_runs):
        self._assert_stationary(dgp1_runs)

    def test_coverage_under_serial_correlation(self):
        config = load_experiment({
            "dgp": "dgp2", "grid": [{"G": 15, "n": 25}, {"G": 50, "n": 25}], "M": 300, "B": 200, "seed": 1,
            "methods": [{"estimator": "ri-mlm", "inference": "default"},
                        {"estimator": "ri-mlm", "inference": "bootstrap"},
                        {"estimator": "fe", "inference": "crse"},
                        {"estimator": "regfe", "inference": "crse"}],
        })
        result = run_experiment(config)
        coverage = result.metrics.set_index(["n_groups", "estimator", "inference"])["coverage"]
        for n_groups in (15, 50):
            assert coverage[(n_groups, "ri-mlm", "default")] < 0.85
        assert 0.88 <= coverage[(50, "ri-mlm", "bootstrap")] <= 0.97
        assert 0.86 <= coverage[(50, "fe", "crse")] <= 0.96
        assert 0.88 <= coverage[(50, "regfe", "crse")] <= 0.97
        self._assert_stationary(result)

    def test_bias_correction_predicts_better_with_small_groups(self):
        config = load_experiment({"dgp": "dgp1", "grid": [{"G": 50, "n": n} for n in (5, 15, 25)],
                                  "estimators": ["fe", "bc-ri"], "test_error": True, "M": 300, "seed": 1})
        result = run_experiment(config)
        wide = result.replicates.pivot(index=["group_size", "replicate"], columns="estimator",
                                       values="test_error").dropna()
        diff = (wide["fe"] - wide["bc-ri"]).groupby(level="group_size")
        mean, mc_se = diff.mean(), diff.std(ddof=1) / np.sqrt(diff.count())
        assert mean[5] > 0
        assert mean[5] >= 2.0 * mc_se[5]
        steps = np.diff(mean.loc[[5, 15, 25]].to_numpy())
        assert np.sum(steps > 0) <= 1
        self._assert_stationary(result)

    def test_regfe_slope_lies_between_fe_and_glm(self):
        config = load_experiment({"dgp": "dgp1", "grid": [{"G": 50, "n": 5}, {"G": 50, "n": 25}],
                                  "estimators": ["glm", "fe", "regfe"], "M": 100, "seed": 2})
        result = run_experiment(config)
        wide = result.replicates.pivot(index=["group_size", "replicate"], columns="estimator",
                                       values="estimate").dropna()
        low = np.minimum(wide["fe"], wide["glm"]) - 1e-8
        high = np.maximum(wide["fe"], wide["glm"]) + 1e-8
        between = (wide["regfe"] >= low) & (wide["regfe"] <= high)
        share = between.groupby(level="group_size").mean()
        assert (share >= 0.9).all()
        self._assert_stationary(result)
