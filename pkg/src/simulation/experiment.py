"""
Monte Carlo experiment runner.

Each replicate of each grid cell generates its own dataset, fits every
requested estimator once, derives the requested intervals and records one
row per (estimator, inference) pair, including the score check of the fit it
used. Replicates run in parallel through joblib and are merged by index, so
the results do not depend on the worker count. Summary metrics are computed
from additive sums so that separate runs of the same grid can be pooled later.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from ..data_processing.grouped_data import GroupedDataset
from ..inference.bootstrap import cluster_bootstrap
from ..inference.variance import VarianceEstimate, model_based, sandwich
from ..models.estimators import ESTIMATOR_LABELS, EstimatorOptions, compare_group_effects, fit_estimator
from ..models.families import FamilyKind
from ..models.irls import FitResult, stationarity_violation
from ..utils.config import get_config
from ..utils.exceptions import ConvergenceError, GroupedGLMError
from ..utils.logger import get_logger
from .dgp import STREAM_IDS, DgpSpec, SimulatedData, generate, generate_test

logger = logging.getLogger(__name__)
experiment_logger = get_logger(__name__)

CELL_KEYS = ["dgp", "n_groups", "group_size", "estimator", "inference"]
SUM_COLUMNS = [
    "n_replicates", "n_failed", "n_estimates", "sum_error", "sum_sq_error", "sum_quartic_error",
    "n_ci", "n_covered", "sum_width", "n_test", "sum_test_error", "sum_sq_test_error",
]
FAILURE_FLAG_SHARE = 0.2
BOOTSTRAP_ROLE = 3


@dataclass
class ExperimentResult:
    """Summary metrics (one row per cell and method) and the replicate-level rows."""

    metrics: pd.DataFrame
    replicates: pd.DataFrame


@dataclass(frozen=True)
class RunSettings:
    """Per-run settings shipped to every replicate worker."""

    methods: tuple
    n_bootstrap: int
    level: float
    crse_correction: str
    test_error: bool
    options: EstimatorOptions


def test_error_rate(train: GroupedDataset, test: GroupedDataset, fit: FitResult) -> float:
    """
    Prediction error of a fit on test rows from the training groups.

    Bernoulli: share misclassified, predicting 1 when the fitted probability
    is at least 0.5. Poisson and Gaussian: mean squared error of the mean.

    Raises:
        DataValidationError: A test group does not occur in the training data
    """
    codes = train.codes_for(test.group_labels[test.group_index])
    mean = fit.predict_mean(test.x, codes)
    if fit.family.family_kind == FamilyKind.BERNOULLI:
        return float(np.mean((mean >= 0.5).astype(float) != test.y))
    return float(np.mean((test.y - mean) ** 2))


def _interval(fit: FitResult, inference: str, sim: SimulatedData, settings: RunSettings) -> VarianceEstimate:
    if inference == "crse":
        return sandwich(fit, correction=settings.crse_correction)
    if inference == "bootstrap":
        spec = sim.spec
        seed = [spec.seed, STREAM_IDS[spec.kind], spec.n_groups, spec.group_size, sim.replicate, BOOTSTRAP_ROLE]
        return cluster_bootstrap(sim.dataset, sim.family, fit.estimator, settings.n_bootstrap, seed,
                                 settings.level, settings.options, n_jobs=1, fit=fit)
    return model_based(fit)


def _run_replicate(spec: DgpSpec, replicate: int, settings: RunSettings) -> List[Dict[str, Any]]:
    sim = generate(spec, replicate)
    test = generate_test(sim) if settings.test_error else None
    target, truth = spec.target, spec.truth()[spec.target]
    cache: Dict[str, Any] = {}
    fits: Dict[str, Any] = {}
    scores: Dict[str, float] = {}
    rows = []
    for method in settings.methods:
        row: Dict[str, Any] = {
            "dgp": spec.kind.value, "n_groups": spec.n_groups, "group_size": spec.group_size,
            "replicate": replicate, "estimator": method.estimator, "inference": method.inference,
            "target": target, "truth": truth, "estimate": np.nan, "error": np.nan, "se": np.nan,
            "ci_lower": np.nan, "ci_upper": np.nan, "covered": np.nan, "ci_width": np.nan,
            "test_error": np.nan, "stationarity": np.nan, "failed": False, "reason": "",
        }
        try:
            if method.estimator not in fits:
                try:
                    fit = fit_estimator(method.estimator, sim.dataset, sim.family, settings.options, cache=cache)
                    if not fit.converged:
                        raise ConvergenceError(f"{method.estimator} did not converge")
                    fits[method.estimator] = fit
                    scores[method.estimator] = stationarity_violation(fit)
                except GroupedGLMError as e:
                    fits[method.estimator] = e
            fit = fits[method.estimator]
            if isinstance(fit, GroupedGLMError):
                raise fit
            j = fit.column_names.index(target)
            estimate = float(fit.fixed_coef[j])
            row.update(estimate=estimate, error=estimate - truth, stationarity=scores[method.estimator])
            if test is not None:
                row["test_error"] = test_error_rate(sim.dataset, test.dataset, fit)
        except GroupedGLMError as e:
            row.update(failed=True, reason=f"{type(e).__name__}: {e}")
            experiment_logger.log_replicate_failure(method.key, replicate, row["reason"])
            rows.append(row)
            continue

        try:
            variance = _interval(fit, method.inference, sim, settings)
            lower, upper = variance.confidence_intervals()
            row.update(se=float(variance.standard_errors()[j]), ci_lower=float(lower[j]), ci_upper=float(upper[j]),
                       covered=float(lower[j] <= truth <= upper[j]), ci_width=float(upper[j] - lower[j]))
        except GroupedGLMError as e:
            row["reason"] = f"interval: {type(e).__name__}: {e}"
            experiment_logger.log_replicate_failure(method.key, replicate, row["reason"])
        rows.append(row)
    return rows


def _sums(group: pd.DataFrame) -> pd.Series:
    ok = group[~group["failed"]]
    errors = ok["error"].to_numpy(dtype=float)
    with_ci = ok[ok["covered"].notna()]
    tested = ok[ok["test_error"].notna()]
    return pd.Series({
        "n_replicates": len(group),
        "n_failed": int(group["failed"].sum()),
        "n_estimates": len(ok),
        "sum_error": errors.sum(),
        "sum_sq_error": (errors ** 2).sum(),
        "sum_quartic_error": (errors ** 4).sum(),
        "n_ci": len(with_ci),
        "n_covered": with_ci["covered"].sum(),
        "sum_width": with_ci["ci_width"].sum(),
        "n_test": len(tested),
        "sum_test_error": tested["test_error"].sum(),
        "sum_sq_test_error": (tested["test_error"] ** 2).sum(),
        "truth": group["truth"].iloc[0],
        "median_estimate": float(np.median(ok["estimate"])) if len(ok) else np.nan,
    })


def _ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    return np.divide(num, den, out=np.full(num.shape, np.nan), where=den > 0)


def metrics_from_sums(sums: pd.DataFrame) -> pd.DataFrame:
    """
    Bias, RMSE, coverage and their Monte Carlo standard errors from additive sums.

    Args:
        sums: Frame with CELL_KEYS, SUM_COLUMNS and truth

    Returns:
        Frame with the metric columns appended
    """
    out = sums.copy()
    m = out["n_estimates"].to_numpy(dtype=float)
    bias = _ratio(out["sum_error"], m)
    mse = _ratio(out["sum_sq_error"], m)
    out["label"] = out["estimator"].map(ESTIMATOR_LABELS)
    out["bias"] = bias
    out["mean_estimate"] = out["truth"] + bias
    out["rmse"] = np.sqrt(mse)

    error_var = _ratio(out["sum_sq_error"] - m * bias ** 2, m - 1)
    out["mc_se_bias"] = np.sqrt(_ratio(np.clip(error_var, 0.0, None), m))
    sq_error_var = _ratio(out["sum_quartic_error"] - m * mse ** 2, m - 1)
    mc_se_mse = np.sqrt(_ratio(np.clip(sq_error_var, 0.0, None), m))
    out["mc_se_rmse"] = _ratio(mc_se_mse, 2.0 * out["rmse"])

    n_ci = out["n_ci"].to_numpy(dtype=float)
    coverage = _ratio(out["n_covered"], n_ci)
    out["coverage"] = coverage
    out["mc_se_coverage"] = np.sqrt(_ratio(coverage * (1.0 - coverage), n_ci))
    out["mean_ci_width"] = _ratio(out["sum_width"], n_ci)

    n_test = out["n_test"].to_numpy(dtype=float)
    test_mean = _ratio(out["sum_test_error"], n_test)
    out["mean_test_error"] = test_mean
    test_var = _ratio(out["sum_sq_test_error"] - n_test * test_mean ** 2, n_test - 1)
    out["mc_se_test_error"] = np.sqrt(_ratio(np.clip(test_var, 0.0, None), n_test))

    out["failure_share"] = _ratio(out["n_failed"], out["n_replicates"])
    out["flagged"] = out["failure_share"] > FAILURE_FLAG_SHARE
    return out


def summarize(replicates: pd.DataFrame) -> pd.DataFrame:
    """MetricsTable rows from replicate-level rows."""
    columns = ["failed", "error", "estimate", "covered", "ci_width", "test_error", "truth"]
    sums = replicates.groupby(CELL_KEYS, sort=False)[columns].apply(_sums).reset_index()
    metrics = metrics_from_sums(sums)
    for col in ("n_replicates", "n_failed", "n_estimates", "n_ci", "n_test"):
        metrics[col] = metrics[col].astype(int)
    return metrics


def _methods_and_specs(config):
    sim = get_config().simulation
    seed = sim.seed if config.seed is None else config.seed
    specs = [DgpSpec(config.dgp, point.n_groups, point.group_size, seed=seed, normal_param=config.normal_param)
             for point in config.grid]
    return config.method_list(), specs


def run_experiment(config, n_jobs: Optional[int] = None) -> ExperimentResult:
    """
    Run every replicate of every grid cell and summarize.

    Args:
        config: ExperimentConfig
        n_jobs: joblib workers (default: configuration)

    Returns:
        ExperimentResult; failures are recorded and cells with more than 20%
        failed fits are flagged, never fatal
    """
    methods, specs = _methods_and_specs(config)
    n_jobs = get_config().simulation.n_jobs if n_jobs is None else n_jobs
    settings = RunSettings(
        methods=tuple(methods), n_bootstrap=config.n_bootstrap, level=config.level,
        crse_correction=config.crse_correction, test_error=config.test_error,
        options=EstimatorOptions.with_nodes(config.n_nodes),
    )
    tasks = [(spec, m) for spec in specs for m in range(config.n_replicates)]
    logger.info(f"Running {len(tasks)} replicates of {config.dgp.value} with {len(methods)} methods")
    results = Parallel(n_jobs=n_jobs)(delayed(_run_replicate)(spec, m, settings) for spec, m in tasks)

    replicates = pd.DataFrame([row for rows in results for row in rows])
    replicates = replicates.sort_values(["n_groups", "group_size", "replicate"], kind="stable").reset_index(drop=True)
    metrics = summarize(replicates)

    for spec in specs:
        cell = replicates[(replicates["n_groups"] == spec.n_groups) & (replicates["group_size"] == spec.group_size)]
        experiment_logger.log_experiment_cell(spec.kind.value, spec.n_groups, spec.group_size,
                                              config.n_replicates, int(cell["failed"].sum()))
    flagged = metrics[metrics["flagged"]]
    for _, row in flagged.iterrows():
        logger.warning(f"{row['estimator']}/{row['inference']} at G={row['n_groups']} n={row['group_size']}: "
                       f"{row['n_failed']} of {row['n_replicates']} fits failed")
    return ExperimentResult(metrics=metrics, replicates=replicates)


def run_group_effect_comparison(config) -> pd.DataFrame:
    """
    Centered group intercepts from RI, RegFE and Group-FE on one replicate per cell.

    Returns:
        Long frame: dgp, n_groups, group_size, group, n, estimator label, effect, truth
    """
    _, specs = _methods_and_specs(config)
    options = EstimatorOptions.with_nodes(config.n_nodes)
    frames = []
    for spec in specs:
        sim = generate(spec, 0)
        wide = compare_group_effects(sim.dataset, sim.family, options)
        intercepts = sim.group_intercepts()
        wide["truth"] = intercepts - intercepts.mean()
        long = wide.melt(id_vars=["group", "n", "truth"], var_name="estimator", value_name="effect")
        long.insert(0, "group_size", spec.group_size)
        long.insert(0, "n_groups", spec.n_groups)
        long.insert(0, "dgp", spec.kind.value)
        frames.append(long)
    return pd.concat(frames, ignore_index=True)


def pool_metrics(tables: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """
    Merge MetricsTables of the same grid by adding their sums.

    Medians cannot be pooled and are dropped when more than one table is given.
    """
    stacked = pd.concat(tables, ignore_index=True)
    keys = CELL_KEYS
    sums = stacked.groupby(keys, sort=False)[SUM_COLUMNS].sum()
    sums["truth"] = stacked.groupby(keys, sort=False)["truth"].first()
    sums["median_estimate"] = (stacked.groupby(keys, sort=False)["median_estimate"].first()
                               if len(tables) == 1 else np.nan)
    return metrics_from_sums(sums.reset_index())
