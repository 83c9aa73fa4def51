"""
Variance estimation for fitted grouped GLMs.

Cluster-robust sandwiches for Group-FE (summed per-observation scores and
Hessians) and for penalized IRLS fits (RegFE and relatives), the model-based
covariance of IRLS fits and the Hessian-based covariance of MLM fits. The
sandwiches share the arrowhead solver of the fitting engine so the G group
coefficients are never inverted densely.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.stats import norm

from ..data_processing.grouped_data import GroupedDataset
from ..models.estimators import MLM_ESTIMATORS
from ..models.families import FamilySpec
from ..models.irls import WEIGHT_FLOOR, ArrowheadSystem, FitResult, PenaltySpec, linear_predictor, model_based_covariance
from ..models.mlm import mle_covariance
from ..utils.config import CRSE_CORRECTIONS, get_config
from ..utils.exceptions import DataValidationError, IncompatibleOptionsError

logger = logging.getLogger(__name__)

INFERENCE_METHODS = ("default", "crse", "bootstrap")
UNSUPPORTED_CRSE = (
    "Cluster-robust standard errors are not available for quadrature-based MLM fits: there is no "
    "comprehensive extension of CRSEs to non-linear MLMs; use --inference bootstrap"
)


class VarianceMethod(str, Enum):
    MLE_HESSIAN = "mle-hessian"
    MODEL_BASED = "model-based"
    CRSE_FE = "crse-fe"
    CRSE_REGFE = "crse-regfe"
    CLUSTER_BOOTSTRAP = "cluster-bootstrap"


@dataclass(frozen=True)
class VarianceEstimate:
    """
    Uncertainty of the fixed coefficients of one fit.

    Attributes:
        method: How the estimate was produced
        names: Coefficient names (beta, then alpha)
        estimates: Point estimates
        covariance: Covariance matrix (absent for the bootstrap)
        c: Small-sample constant applied to a sandwich
        level: Confidence level of the stored or derived intervals
        ci_lower: Percentile interval lower ends (bootstrap)
        ci_upper: Percentile interval upper ends (bootstrap)
        replicates: Successful bootstrap estimates, one row per refit
        n_failed: Failed bootstrap refits
        n_replicates: Requested bootstrap refits
        seed: Bootstrap seed
    """

    method: VarianceMethod
    names: Tuple[str, ...]
    estimates: np.ndarray
    covariance: Optional[np.ndarray] = None
    c: float = 1.0
    level: float = 0.95
    ci_lower: Optional[np.ndarray] = None
    ci_upper: Optional[np.ndarray] = None
    replicates: Optional[np.ndarray] = None
    n_failed: int = 0
    n_replicates: int = 0
    seed: Optional[object] = None

    def standard_errors(self) -> np.ndarray:
        if self.covariance is not None:
            return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))
        if self.replicates is not None and self.replicates.shape[0] > 1:
            return self.replicates.std(axis=0, ddof=1)
        return np.full(self.estimates.shape, np.nan)

    def confidence_intervals(self) -> Tuple[np.ndarray, np.ndarray]:
        """Percentile intervals for the bootstrap, Wald intervals otherwise."""
        if self.ci_lower is not None and self.ci_upper is not None:
            return self.ci_lower, self.ci_upper
        z = norm.ppf(0.5 + self.level / 2.0)
        se = self.standard_errors()
        return self.estimates - z * se, self.estimates + z * se

    def covers(self, index: int, truth: float) -> bool:
        lower, upper = self.confidence_intervals()
        return bool(lower[index] <= truth <= upper[index])

    def metadata(self) -> dict:
        return {
            "method": self.method.value,
            "c": self.c,
            "level": self.level,
            "n_replicates": self.n_replicates or None,
            "n_failed": self.n_failed,
            "seed": self.seed,
        }


def small_sample_correction(kind: str, n_groups: int, n_obs: int, n_params: int) -> float:
    """
    Finite-sample constant c for a cluster-robust sandwich.

    Args:
        kind: "none", "g-over-g-1" (G / (G - 1)) or "stata" (G / (G - 1) * (N - 1) / (N - k))
        n_groups: Clusters G
        n_obs: Observations N
        n_params: Fixed coefficients k

    Returns:
        c
    """
    if kind not in CRSE_CORRECTIONS:
        raise IncompatibleOptionsError(f"Unknown CRSE correction '{kind}'; expected one of {CRSE_CORRECTIONS}")
    if kind == "none":
        return 1.0
    if n_groups < 2:
        raise DataValidationError("A cluster-robust correction needs at least two groups")
    c = n_groups / (n_groups - 1.0)
    if kind == "stata":
        if n_obs <= n_params:
            raise DataValidationError(f"stata correction needs N > k, got N={n_obs}, k={n_params}")
        c *= (n_obs - 1.0) / (n_obs - n_params)
    return c


def _active_design(fit: FitResult, ds: Optional[GroupedDataset]) -> Tuple[GroupedDataset, np.ndarray, np.ndarray]:
    """Dataset restricted to groups with finite coefficients, their gamma and free mask."""
    ds = ds if ds is not None else fit.design
    active = fit.active_groups
    if active.all():
        return ds, fit.gamma_hat, fit.free_groups
    return ds.resample_groups(np.flatnonzero(active)), fit.gamma_hat[active], fit.free_groups[active]


def _sandwich(system: ArrowheadSystem, ds: GroupedDataset, unit_scores: np.ndarray, c: float) -> np.ndarray:
    x_scores = ds.group_sums(ds.x * unit_scores[:, None]).T
    z_scores = ds.group_sums(ds.z * unit_scores[:, None])
    q = system.fixed_rows_of_inverse_times(x_scores, z_scores)
    cov = c * (q @ q.T)
    return 0.5 * (cov + cov.T)


def _resolve_c(c: Optional[float], correction: Optional[str], ds: GroupedDataset) -> float:
    if c is not None:
        return float(c)
    correction = correction or get_config().inference.crse_correction
    return small_sample_correction(correction, ds.n_groups, ds.n_obs, ds.n_fixed)


def crse_regfe(fit: FitResult, ds: Optional[GroupedDataset] = None, fam: Optional[FamilySpec] = None,
               pen: Optional[PenaltySpec] = None, c: Optional[float] = None,
               correction: Optional[str] = None) -> VarianceEstimate:
    """
    Cluster-robust covariance of a penalized IRLS fit.

    c * M [blockdiag e_g e_g'] M' with M = ([X Z]' W [X Z] + S)^-1 [X Z]' W at
    the converged weights and e = (y - mu) h'(mu).

    Args:
        fit: Converged IRLS fit
        ds: Dataset (default: the fit's design)
        fam: Family (default: the fit's)
        pen: Penalty (default: the fit's)
        c: Small-sample constant; default from correction
        correction: Name of the small-sample correction

    Returns:
        VarianceEstimate over beta and alpha
    """
    if fit.estimator in MLM_ESTIMATORS:
        raise IncompatibleOptionsError(UNSUPPORTED_CRSE)
    fam = fam or fit.family
    pen = pen or fit.penalty
    sub, gamma, free = _active_design(fit, ds)
    eta = linear_predictor(sub, fit.fixed_coef, gamma)
    mu = fam.link_inverse(eta)
    weights = np.maximum(fam.irls_weight(eta), WEIGHT_FLOOR)
    residuals = (sub.y - mu) / weights
    system = ArrowheadSystem(sub, weights, pen.block(sub.n_random), free)
    c = _resolve_c(c, correction, sub)
    cov = _sandwich(system, sub, weights * residuals, c)
    return VarianceEstimate(VarianceMethod.CRSE_REGFE, fit.column_names, fit.fixed_coef, cov, c=c)


def crse_fe(fit: FitResult, ds: Optional[GroupedDataset] = None, fam: Optional[FamilySpec] = None,
            c: Optional[float] = None, correction: Optional[str] = None) -> VarianceEstimate:
    """
    Cluster-robust covariance of a Group-FE fit.

    bread = (-sum_i H_i)^-1 and meat = sum_g (sum_i S_i)(sum_i S_i)', where
    S_i and H_i are the per-observation score and Hessian of the log-likelihood
    in (beta, gamma). Groups without finite coefficients are left out.

    Args:
        fit: Converged FE fit
        ds: Dataset (default: the fit's design)
        fam: Family (default: the fit's)
        c: Small-sample constant; default from correction
        correction: Name of the small-sample correction

    Returns:
        VarianceEstimate over beta and alpha
    """
    if not fit.penalty.is_zero:
        raise IncompatibleOptionsError("crse_fe applies to unpenalized fits; use crse_regfe")
    fam = fam or fit.family
    sub, gamma, free = _active_design(fit, ds)
    eta = linear_predictor(sub, fit.fixed_coef, gamma)
    information = np.asarray(fam.eta_information(eta), dtype=float)
    scores = np.asarray(fam.eta_score(sub.y, eta), dtype=float)
    system = ArrowheadSystem(sub, information, np.zeros((sub.n_random, sub.n_random)), free)
    c = _resolve_c(c, correction, sub)
    cov = _sandwich(system, sub, scores, c)
    return VarianceEstimate(VarianceMethod.CRSE_FE, fit.column_names, fit.fixed_coef, cov, c=c)


def model_based(fit: FitResult) -> VarianceEstimate:
    """Default covariance: mle_covariance for MLM fits, s(theta)(U'WU + S)^-1 otherwise."""
    if fit.mlm_fit is not None and fit.estimator in MLM_ESTIMATORS:
        return VarianceEstimate(VarianceMethod.MLE_HESSIAN, fit.column_names, fit.fixed_coef,
                                mle_covariance(fit.mlm_fit))
    return VarianceEstimate(VarianceMethod.MODEL_BASED, fit.column_names, fit.fixed_coef,
                            model_based_covariance(fit))


def check_compatible(estimator: str, inference: str):
    """Reject estimator/inference pairs that have no valid implementation."""
    if inference not in INFERENCE_METHODS:
        raise IncompatibleOptionsError(f"Unknown inference '{inference}'; expected one of {INFERENCE_METHODS}")
    if inference == "crse" and estimator in MLM_ESTIMATORS:
        raise IncompatibleOptionsError(f"{estimator} with crse: {UNSUPPORTED_CRSE}")


def sandwich(fit: FitResult, c: Optional[float] = None, correction: Optional[str] = None) -> VarianceEstimate:
    """crse_fe for Group-FE, crse_regfe for every other IRLS fit."""
    check_compatible(fit.estimator, "crse")
    if fit.estimator == "fe":
        return crse_fe(fit, c=c, correction=correction)
    return crse_regfe(fit, c=c, correction=correction)
