"""
Percentile cluster bootstrap.

Whole groups are resampled with replacement and the estimator is refit on
each resample, warm-started from the full-sample fit. Replicate b always
draws from the stream SeedSequence(seed, spawn_key=(b,)), so results do not
depend on the number of workers or the order they finish in.
"""

import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from ..data_processing.grouped_data import GroupedDataset
from ..models.estimators import EstimatorOptions, WarmStart, fit_estimator
from ..models.families import FamilySpec
from ..models.irls import FitResult
from ..utils.config import get_config
from ..utils.exceptions import BootstrapFailureError, DataValidationError, GroupedGLMError, IncompatibleOptionsError
from ..utils.logger import get_logger
from .variance import VarianceEstimate, VarianceMethod

logger = logging.getLogger(__name__)
bootstrap_logger = get_logger(__name__)

SeedLike = Union[int, Sequence[int]]
MIN_REPLICATES = 50


def replicate_generator(seed: SeedLike, replicate: int) -> np.random.Generator:
    """Counter-based generator owned by one bootstrap replicate."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(replicate,))))


def resample_codes(n_groups: int, seed: SeedLike, replicate: int) -> np.ndarray:
    """Group codes drawn with replacement for one replicate."""
    return replicate_generator(seed, replicate).integers(0, n_groups, size=n_groups)


def _refit(replicate: int, ds: GroupedDataset, fam: FamilySpec, estimator: str, options: EstimatorOptions,
           start: WarmStart, seed: SeedLike) -> Tuple[Optional[np.ndarray], str]:
    codes = resample_codes(ds.n_groups, seed, replicate)
    try:
        sample = ds.resample_groups(codes)
        fit = fit_estimator(estimator, sample, fam, options, start.for_groups(codes))
    except GroupedGLMError as e:
        return None, f"{type(e).__name__}: {e}"
    if not fit.converged:
        return None, "did not converge"
    if not np.all(np.isfinite(fit.fixed_coef)):
        return None, "non-finite coefficients"
    return fit.fixed_coef, ""


def cluster_bootstrap(ds: GroupedDataset, fam: FamilySpec, estimator: str, n_replicates: Optional[int] = None,
                      seed: Optional[SeedLike] = None, level: Optional[float] = None,
                      options: Optional[EstimatorOptions] = None, n_jobs: Optional[int] = None,
                      fit: Optional[FitResult] = None,
                      max_failure_share: Optional[float] = None) -> VarianceEstimate:
    """
    Percentile confidence intervals from a cluster bootstrap.

    Args:
        ds: Dataset
        fam: Family
        estimator: Estimator name
        n_replicates: Bootstrap replicates B
        seed: Root seed (an int or a sequence of ints)
        level: Confidence level
        options: Numerical settings for the refits
        n_jobs: joblib workers (default: all cores)
        fit: Full-sample fit; computed when absent
        max_failure_share: Largest tolerated share of failed refits

    Returns:
        VarianceEstimate with percentile intervals and the replicate estimates

    Raises:
        DataValidationError: Fewer than two groups
        IncompatibleOptionsError: Fewer than MIN_REPLICATES replicates
        BootstrapFailureError: Too many failed refits
    """
    inference = get_config().inference
    n_replicates = inference.n_bootstrap if n_replicates is None else int(n_replicates)
    level = inference.level if level is None else level
    max_failure_share = inference.max_failure_share if max_failure_share is None else max_failure_share
    seed = get_config().simulation.seed if seed is None else seed
    n_jobs = -1 if n_jobs is None else n_jobs

    if ds.n_groups < 2:
        raise DataValidationError("A cluster bootstrap needs at least two groups")
    if n_replicates < MIN_REPLICATES:
        raise IncompatibleOptionsError(
            f"Percentile intervals need at least {MIN_REPLICATES} bootstrap replicates, got {n_replicates}"
        )

    options = options or EstimatorOptions()
    fit = fit if fit is not None else fit_estimator(estimator, ds, fam, options)
    start = WarmStart.from_fit(fit)

    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_refit)(b, ds, fam, estimator, options, start, seed) for b in range(n_replicates)
    )
    draws = [coef for coef, _ in outcomes if coef is not None]
    failures = [(b, reason) for b, (coef, reason) in enumerate(outcomes) if coef is None]
    for b, reason in failures:
        bootstrap_logger.log_replicate_failure(estimator, b, reason)
    n_failed = len(failures)
    bootstrap_logger.log_bootstrap(estimator, n_replicates, n_failed, n_groups=ds.n_groups)

    if n_failed > max_failure_share * n_replicates or len(draws) < 2:
        raise BootstrapFailureError(
            f"{n_failed} of {n_replicates} bootstrap refits of {estimator} failed "
            f"(limit {max_failure_share:.0%})",
            n_failed=n_failed, n_replicates=n_replicates,
        )

    replicates = np.vstack(draws)
    alpha = 1.0 - level
    lower, upper = np.quantile(replicates, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
    return VarianceEstimate(
        method=VarianceMethod.CLUSTER_BOOTSTRAP, names=fit.column_names, estimates=fit.fixed_coef,
        level=level, ci_lower=lower, ci_upper=upper, replicates=replicates, n_failed=n_failed,
        n_replicates=n_replicates, seed=seed if isinstance(seed, int) else list(seed),
    )
