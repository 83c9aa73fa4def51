"""
Estimator registry.

Maps estimator names (glm, fe, regfe, ri-mlm, bc-ri, bc-regfe) onto the
fitting functions, builds the bias-corrected fits on augmented designs and
carries warm starts between related fits (bootstrap refits, RegFE after its
MLM fit).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

from ..data_processing.grouped_data import GroupedDataset, augment
from ..utils.config import EstimationConfig, QuadratureConfig, get_config
from ..utils.exceptions import IncompatibleOptionsError
from .families import FamilySpec
from .irls import FitResult, PenaltySpec, fit_fe, fit_glm, fit_regfe
from .mlm import MlmFit, QuadratureSpec, fit_mlm, penalty_from_mlm

logger = logging.getLogger(__name__)

ESTIMATOR_LABELS = {
    "glm": "GLM",
    "ri-mlm": "RI",
    "fe": "Group-FE",
    "bc-ri": "bcRI",
    "bc-regfe": "bcRegFE",
    "regfe": "RegFE",
}
ESTIMATORS = tuple(ESTIMATOR_LABELS)
BIAS_CORRECTED = ("bc-ri", "bc-regfe")
MLM_ESTIMATORS = ("ri-mlm", "bc-ri")


@dataclass
class EstimatorOptions:
    """Numerical settings shared by every estimator in a run."""

    quad: QuadratureSpec = field(default_factory=QuadratureSpec.from_config)
    estimation: EstimationConfig = field(default_factory=lambda: get_config().estimation)
    quadrature: QuadratureConfig = field(default_factory=lambda: get_config().quadrature)

    @classmethod
    def with_nodes(cls, n_nodes: int, adaptive: bool = True) -> "EstimatorOptions":
        return cls(quad=QuadratureSpec(n_nodes, adaptive))


@dataclass(frozen=True)
class WarmStart:
    """Start values taken from an earlier fit of the same estimator."""

    fixed: np.ndarray
    gamma: np.ndarray
    mlm_beta: Optional[np.ndarray] = None
    omega_sq: float = 1.0
    theta: float = 1.0

    @classmethod
    def from_fit(cls, fit: FitResult) -> "WarmStart":
        mlm = fit.mlm_fit
        return cls(
            fixed=fit.fixed_coef, gamma=fit.gamma_hat,
            mlm_beta=None if mlm is None else mlm.beta_hat,
            omega_sq=1.0 if mlm is None else max(mlm.omega_sq_hat, 1e-4),
            theta=fit.theta_hat if mlm is None else mlm.theta_hat,
        )

    def for_groups(self, codes: Sequence[int]) -> "WarmStart":
        """Start for a dataset made of the given groups of the original one."""
        gamma = self.gamma[np.asarray(codes, dtype=int)]
        return WarmStart(self.fixed, gamma, self.mlm_beta, self.omega_sq, self.theta)

    def irls(self):
        return self.fixed, self.gamma

    def mlm(self):
        beta = self.mlm_beta if self.mlm_beta is not None else self.fixed
        return beta, self.omega_sq, self.theta


def _mlm_start(start: Optional[WarmStart], ds: GroupedDataset):
    if start is None or not ds.is_random_intercept:
        return None
    beta, omega_sq, theta = start.mlm()
    return (beta, omega_sq, theta) if beta.shape[0] == ds.n_fixed else None


def _irls_start(start: Optional[WarmStart], ds: GroupedDataset):
    if start is None or start.fixed.shape[0] != ds.n_fixed or start.gamma.shape[0] != ds.n_groups:
        return None
    return start.irls()


def fit_bc(ds: GroupedDataset, fam: FamilySpec, estimator: str, pen: Optional[PenaltySpec] = None,
           quad: Optional[QuadratureSpec] = None, options: Optional[EstimatorOptions] = None,
           start: Optional[WarmStart] = None, mlm: Optional[MlmFit] = None) -> FitResult:
    """
    Bias-corrected MLM or RegFE.

    The design is augmented with group means (intercept-only Z) or within-group
    projections onto Z, then the MLM or RegFE is fit on the augmented design;
    the added coefficients are reported as alpha_hat.

    Args:
        ds: Dataset
        fam: Family
        estimator: "bcMLM"/"bc-ri" or "bcRegFE"/"bc-regfe"
        pen: RegFE penalty; default from the bcMLM fit
        quad: Quadrature rule for the MLM
        options: Numerical settings
        start: Warm start
        mlm: Already computed bcMLM fit on the augmented design

    Returns:
        FitResult tagged bc-ri or bc-regfe
    """
    names = {"bcmlm": "bc-ri", "bc-ri": "bc-ri", "bcri": "bc-ri", "bcregfe": "bc-regfe", "bc-regfe": "bc-regfe"}
    tag = names.get(estimator.lower())
    if tag is None:
        raise IncompatibleOptionsError(f"Unknown bias-corrected estimator '{estimator}'")
    options = options or EstimatorOptions()
    quad = quad or options.quad

    augmented = augment(ds)
    design = augmented.to_dataset()
    if mlm is None and (tag == "bc-ri" or pen is None):
        mlm = fit_mlm(design, fam, quad, _mlm_start(start, design), options.quadrature)
    if tag == "bc-ri":
        return mlm.to_fit_result("bc-ri", augmentation=augmented)

    if pen is None:
        pen = penalty_from_mlm(mlm)
        fam = fam.with_dispersion(mlm.theta_hat)
    fit = fit_regfe(design, fam, pen, _irls_start(start, design), options.estimation, estimator="bc-regfe")
    return _attach(fit, augmented, mlm)


def _attach(fit: FitResult, augmentation, mlm: Optional[MlmFit]) -> FitResult:
    return replace(fit, augmentation=augmentation, mlm_fit=mlm)


def fit_estimator(name: str, ds: GroupedDataset, fam: FamilySpec, options: Optional[EstimatorOptions] = None,
                  start: Optional[WarmStart] = None, cache: Optional[Dict[str, MlmFit]] = None) -> FitResult:
    """
    Fit an estimator by name.

    Args:
        name: One of ESTIMATORS
        ds: Dataset
        fam: Family
        options: Numerical settings
        start: Warm start from a fit of the same estimator
        cache: MLM fits shared between estimators on the same dataset
            (keys "ri-mlm" and "bc-ri")

    Returns:
        FitResult
    """
    options = options or EstimatorOptions()
    cache = {} if cache is None else cache
    if name == "glm":
        return fit_glm(ds, fam, options.estimation)
    if name == "fe":
        return fit_fe(ds, fam, _irls_start(start, ds), options.estimation)
    if name in ("ri-mlm", "regfe"):
        if "ri-mlm" not in cache:
            cache["ri-mlm"] = fit_mlm(ds, fam, options.quad, _mlm_start(start, ds), options.quadrature)
        mlm = cache["ri-mlm"]
        if name == "ri-mlm":
            return mlm.to_fit_result("ri-mlm")
        fit = fit_regfe(ds, fam.with_dispersion(mlm.theta_hat), penalty_from_mlm(mlm), _irls_start(start, ds),
                        options.estimation)
        return _attach(fit, None, mlm)
    if name in BIAS_CORRECTED:
        fit = fit_bc(ds, fam, name, options=options, start=start, mlm=cache.get("bc-ri"))
        if fit.mlm_fit is not None:
            cache["bc-ri"] = fit.mlm_fit
        return fit
    raise IncompatibleOptionsError(f"Unknown estimator '{name}'; expected one of {list(ESTIMATORS)}")


def compare_group_effects(ds: GroupedDataset, fam: FamilySpec,
                          options: Optional[EstimatorOptions] = None) -> pd.DataFrame:
    """
    Centered group intercepts from RI, RegFE and Group-FE side by side.

    Returns:
        Frame with one row per group: label, size and one column per estimator
    """
    cache: Dict[str, MlmFit] = {}
    frame = pd.DataFrame({"group": ds.group_labels, "n": ds.group_sizes})
    for name in ("ri-mlm", "regfe", "fe"):
        fit = fit_estimator(name, ds, fam, options, cache=cache)
        frame[ESTIMATOR_LABELS[name]] = fit.centered_group_effects()
    return frame
