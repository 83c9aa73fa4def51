"""
Penalized iteratively reweighted least squares.

One engine fits every estimator built on fixed group coefficients: the pooled
GLM (no group terms), Group-FE (zero penalty, one reference group pinned),
RegFE (Gaussian-prior penalty s(theta) * Omega^-1 on each group block) and the
RegFE half of the bias-corrected estimators. Each step solves

    ([X Z]' W [X Z] + S) [beta; gamma] = [X Z]' W A

exploiting the arrowhead structure of the system: a dense block for the fixed
coefficients and a block-diagonal block for the group coefficients.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.stats import multivariate_normal

from ..data_processing.grouped_data import AugmentedDataset, GroupedDataset
from ..utils.config import EstimationConfig, get_config
from ..utils.exceptions import DomainError, IdentifiabilityError
from ..utils.logger import get_logger
from .families import FamilyKind, FamilySpec

logger = logging.getLogger(__name__)
fit_logger = get_logger(__name__)

WEIGHT_FLOOR = 1e-12
SINGULAR_RTOL = 1e-12


# ----------------------------------------------------------------------
# penalty


@dataclass(frozen=True)
class PenaltySpec:
    """
    Gaussian-prior penalty on the group coefficients.

    Attributes:
        omega: Random-effect covariance (d x d); None means no penalty
        scale: s(theta) multiplying Omega^-1 in every group block
    """

    omega: Optional[np.ndarray] = None
    scale: float = 1.0

    def __post_init__(self):
        if self.omega is None:
            return
        omega = np.atleast_2d(np.asarray(self.omega, dtype=float)).copy()
        if omega.shape[0] != omega.shape[1] or not np.all(np.isfinite(omega)):
            raise DomainError(f"Omega must be a finite square matrix, got shape {omega.shape}")
        if not np.allclose(omega, omega.T, rtol=1e-12, atol=0.0):
            raise DomainError("Omega must be symmetric")
        try:
            np.linalg.cholesky(omega)
        except np.linalg.LinAlgError:
            raise DomainError(f"Omega must be positive definite, eigenvalues {np.linalg.eigvalsh(omega)}")
        if not self.scale > 0:
            raise DomainError(f"Penalty scale must be positive, got {self.scale}")
        omega.setflags(write=False)
        object.__setattr__(self, "omega", omega)

    @classmethod
    def from_omega_sq(cls, omega_sq: float, scale: float = 1.0) -> "PenaltySpec":
        if not omega_sq > 0:
            raise DomainError(f"omega^2 must be positive, got {omega_sq}")
        return cls(np.array([[float(omega_sq)]]), float(scale))

    @classmethod
    def unpenalized(cls) -> "PenaltySpec":
        return cls(None)

    @property
    def is_zero(self) -> bool:
        return self.omega is None

    @property
    def n_random(self) -> Optional[int]:
        return None if self.omega is None else int(self.omega.shape[0])

    @property
    def lambda_glm(self) -> float:
        """1 / (2 omega^2) for a random-intercept penalty."""
        self._require_scalar()
        return 0.0 if self.is_zero else 1.0 / (2.0 * float(self.omega[0, 0]))

    @property
    def lambda_lin(self) -> float:
        """sigma^2 / omega^2, the ridge parameter of the linear case."""
        self._require_scalar()
        return 0.0 if self.is_zero else self.scale / float(self.omega[0, 0])

    def _require_scalar(self):
        if self.omega is not None and self.omega.shape != (1, 1):
            raise DomainError("lambda parameters are defined for a random-intercept penalty only")

    def block(self, d: int) -> np.ndarray:
        """Per-group penalty s(theta) Omega^-1, or zeros."""
        if self.is_zero:
            return np.zeros((d, d))
        if self.omega.shape[0] != d:
            raise DomainError(f"Penalty is {self.omega.shape[0]}-dimensional but Z has {d} columns")
        return self.scale * linalg.inv(self.omega)

    def penalty_matrix(self, n_fixed: int, n_groups: int) -> np.ndarray:
        """Dense block-diagonal S over [fixed coefficients, gamma_1..gamma_G]."""
        d = 1 if self.is_zero else self.omega.shape[0]
        blocks = [np.zeros((n_fixed, n_fixed))] + [self.block(d)] * n_groups
        return linalg.block_diag(*blocks)

    def log_prior(self, gamma: np.ndarray) -> float:
        """Sum over groups of log N(gamma_g; 0, Omega)."""
        if self.is_zero or gamma.shape[0] == 0:
            return 0.0
        d = self.omega.shape[0]
        values = multivariate_normal.logpdf(gamma.reshape(-1, d), mean=np.zeros(d), cov=self.omega)
        return float(np.sum(values))


# ----------------------------------------------------------------------
# linear algebra


class ArrowheadSystem:
    """
    Factorized penalized normal equations ([X Z]' W [X Z] + S).

    Group blocks are solved in a batch; the fixed block is the Schur
    complement, factorized once by Cholesky. Groups that are not free (the
    pinned reference group) contribute rows but no unknowns.
    """

    def __init__(self, ds: GroupedDataset, weights: np.ndarray, penalty_block: np.ndarray,
                 free: np.ndarray):
        x, z = ds.x, ds.z
        starts = ds.group_starts
        self.ds = ds
        self.free = np.asarray(free, dtype=bool)
        self.n_fixed = ds.n_fixed
        self.d = ds.n_random

        xw = x * weights[:, None]
        self.a = x.T @ xw
        b_all = np.add.reduceat(np.einsum("np,nd->npd", xw, z), starts, axis=0)
        d_all = np.add.reduceat(np.einsum("nd,ne->nde", z * weights[:, None], z), starts, axis=0)
        self.b = b_all[self.free]
        self.dmat = d_all[self.free] + penalty_block[None, :, :]

        if self.b.shape[0]:
            try:
                np.linalg.cholesky(self.dmat)
            except np.linalg.LinAlgError:
                bad = [ds.group_labels[self.free][g] for g in range(self.dmat.shape[0])
                       if np.linalg.eigvalsh(self.dmat[g]).min() <= 0]
                raise IdentifiabilityError(f"Group blocks are singular for groups {bad[:10]}", columns=[])
            self.dinv_bt = np.linalg.solve(self.dmat, np.transpose(self.b, (0, 2, 1)))
            schur = self.a - np.einsum("gpd,gdq->pq", self.b, self.dinv_bt)
        else:
            self.dinv_bt = np.zeros((0, self.d, self.n_fixed))
            schur = self.a.copy()
        self.schur = 0.5 * (schur + schur.T)
        self._check_schur()
        self.schur_factor = linalg.cho_factor(self.schur)

    def _check_schur(self):
        diag = np.diag(self.schur)
        names = self.ds.column_names
        if np.any(diag <= 0):
            raise IdentifiabilityError(
                f"Normal equations are singular in columns {[names[j] for j in np.flatnonzero(diag <= 0)]}",
                columns=[names[j] for j in np.flatnonzero(diag <= 0)],
            )
        scale = np.sqrt(diag)
        scaled = self.schur / np.outer(scale, scale)
        if np.linalg.eigvalsh(scaled).min() < SINGULAR_RTOL:
            r, pivots = linalg.qr(scaled, mode="r", pivoting=True)
            rank = int(np.sum(np.abs(np.diag(r)) > len(names) * SINGULAR_RTOL * abs(r[0, 0])))
            offending = [names[j] for j in pivots[min(rank, len(names) - 1):]]
            raise IdentifiabilityError(
                f"Normal equations are singular: columns {offending} are collinear with the group effects",
                columns=offending,
            )

    def solve(self, rhs_fixed: np.ndarray, rhs_groups: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Solve for (fixed, gamma); gamma rows of non-free groups are zero."""
        gamma = np.zeros((self.free.shape[0], self.d))
        r_g = rhs_groups[self.free]
        if r_g.shape[0]:
            dinv_r = np.linalg.solve(self.dmat, r_g[:, :, None])[:, :, 0]
            reduced = rhs_fixed - np.einsum("gpd,gd->p", self.b, dinv_r)
        else:
            dinv_r = r_g
            reduced = rhs_fixed
        fixed = linalg.cho_solve(self.schur_factor, reduced)
        if r_g.shape[0]:
            gamma[self.free] = dinv_r - np.einsum("gdp,p->gd", self.dinv_bt, fixed)
        return fixed, gamma

    def fixed_inverse(self) -> np.ndarray:
        """Fixed-coefficient block of the inverse system matrix."""
        return linalg.cho_solve(self.schur_factor, np.eye(self.n_fixed))

    def fixed_rows_of_inverse_times(self, x_scores: np.ndarray, z_scores: np.ndarray) -> np.ndarray:
        """
        Fixed rows of H^-1 [u_1 .. u_G] for per-group score vectors.

        Args:
            x_scores: P x G fixed parts of the group score vectors
            z_scores: G x d group parts (ignored for non-free groups)

        Returns:
            P x G matrix
        """
        reduced = x_scores.copy()
        if self.b.shape[0]:
            dinv_z = np.linalg.solve(self.dmat, z_scores[self.free][:, :, None])[:, :, 0]
            reduced[:, self.free] -= np.einsum("gpd,gd->pg", self.b, dinv_z)
        return linalg.cho_solve(self.schur_factor, reduced)


# ----------------------------------------------------------------------
# state and steps


@dataclass(frozen=True)
class IrlsState:
    """
    One IRLS iterate.

    Attributes:
        fixed: Fixed coefficients (beta, then alpha for augmented designs)
        gamma: G x d group coefficients
        eta: Linear predictor
        weights: IRLS weights, floored at a tiny positive value
        working_response: eta + (y - mu) h'(mu)
        iteration: Completed steps
        objective_trace: Penalized log-likelihood after each accepted step
    """

    fixed: Optional[np.ndarray]
    gamma: np.ndarray
    eta: np.ndarray
    weights: np.ndarray
    working_response: np.ndarray
    iteration: int = 0
    objective_trace: Tuple[float, ...] = ()

    @property
    def objective(self) -> Optional[float]:
        return self.objective_trace[-1] if self.objective_trace else None


def linear_predictor(ds: GroupedDataset, fixed: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    return ds.x @ fixed + np.einsum("nd,nd->n", ds.z, gamma[ds.group_index])


def _working_quantities(ds: GroupedDataset, fam: FamilySpec, eta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mu = fam.link_inverse(eta)
    weights = np.maximum(fam.irls_weight(eta), WEIGHT_FLOOR)
    # canonical links: h'(mu) = 1 / v(mu) = 1 / w
    working = eta + (ds.y - mu) / weights
    return weights, working


def initial_state(ds: GroupedDataset, fam: FamilySpec, fixed: Optional[np.ndarray] = None,
                  gamma: Optional[np.ndarray] = None) -> IrlsState:
    """
    Starting iterate from coefficients, or from the family's starting means.

    Without coefficients the first step is an ordinary GLM start; no
    objective is recorded for it.
    """
    if gamma is None:
        gamma = np.zeros((ds.n_groups, ds.n_random))
    if fixed is None:
        eta = np.asarray(fam.link(fam.initial_mean(ds.y)), dtype=float)
    else:
        eta = linear_predictor(ds, fixed, gamma)
    weights, working = _working_quantities(ds, fam, eta)
    return IrlsState(fixed, gamma, eta, weights, working)


def penalized_objective(ds: GroupedDataset, fam: FamilySpec, fixed: np.ndarray, gamma: np.ndarray,
                        pen: Optional[PenaltySpec] = None) -> float:
    """
    Log of the RegFE objective: log p_GLM(Y | beta, gamma) + log p(gamma | Omega).

    Normalizing constants are included. Groups whose gamma is not finite
    (excluded or separated) are left out.

    Args:
        ds: Dataset the coefficients belong to
        fam: Family (its dispersion enters the likelihood)
        fixed: Fixed coefficients
        gamma: G x d group coefficients
        pen: Penalty; None or unpenalized gives the plain log-likelihood

    Returns:
        Objective value
    """
    finite = np.all(np.isfinite(gamma), axis=1)
    rows = finite[ds.group_index]
    eta = ds.x[rows] @ fixed + np.einsum("nd,nd->n", ds.z[rows], gamma[ds.group_index[rows]])
    value = float(np.sum(fam.loglik_obs(ds.y[rows], eta, check=False)))
    if pen is not None and not pen.is_zero:
        value += pen.log_prior(gamma[finite])
    return value


def irls_step(state: IrlsState, ds: GroupedDataset, fam: FamilySpec, pen: PenaltySpec,
              free: Optional[np.ndarray] = None) -> IrlsState:
    """
    One exact penalized IRLS step.

    Args:
        state: Current iterate (its weights and working response are used)
        ds: Dataset
        fam: Family
        pen: Penalty
        free: Mask of groups with estimated coefficients (default: all)

    Returns:
        The iterate at the solution of the weighted penalized normal equations
    """
    if free is None:
        free = np.ones(ds.n_groups, dtype=bool)
    system = ArrowheadSystem(ds, state.weights, pen.block(ds.n_random), free)
    wa = state.weights * state.working_response
    rhs_fixed = ds.x.T @ wa
    rhs_groups = np.add.reduceat(ds.z * wa[:, None], ds.group_starts, axis=0)
    fixed, gamma = system.solve(rhs_fixed, rhs_groups)
    eta = linear_predictor(ds, fixed, gamma)
    weights, working = _working_quantities(ds, fam, eta)
    objective = penalized_objective(ds, fam, fixed, gamma, pen)
    return IrlsState(fixed, gamma, eta, weights, working, state.iteration + 1,
                     state.objective_trace + (objective,))


def _state_between(old: IrlsState, new: IrlsState, ds: GroupedDataset, fam: FamilySpec,
                   pen: PenaltySpec) -> IrlsState:
    fixed = 0.5 * (old.fixed + new.fixed)
    gamma = 0.5 * (old.gamma + new.gamma)
    eta = linear_predictor(ds, fixed, gamma)
    weights, working = _working_quantities(ds, fam, eta)
    objective = penalized_objective(ds, fam, fixed, gamma, pen)
    return IrlsState(fixed, gamma, eta, weights, working, new.iteration,
                     old.objective_trace + (objective,))


@dataclass(frozen=True)
class _IrlsOutcome:
    state: IrlsState
    converged: bool
    halving_failed: bool = False


def run_irls(ds: GroupedDataset, fam: FamilySpec, pen: PenaltySpec, free: Optional[np.ndarray] = None,
             start: Optional[IrlsState] = None, settings: Optional[EstimationConfig] = None) -> _IrlsOutcome:
    """
    Iterate penalized IRLS steps with step-halving to convergence.

    Convergence is a relative change of the penalized deviance below
    settings.tol; a step that lowers the objective is halved up to
    settings.max_halvings times.
    """
    settings = settings or get_config().estimation
    state = start if start is not None else initial_state(ds, fam)
    if state.fixed is not None and not state.objective_trace:
        state = replace(state, objective_trace=(penalized_objective(ds, fam, state.fixed, state.gamma, pen),))
    converged = False
    for _ in range(settings.max_iter):
        candidate = irls_step(state, ds, fam, pen, free)
        old = state.objective
        new = candidate.objective
        if old is not None:
            halvings = 0
            slack = 1e-12 * (1.0 + abs(old))
            while (not np.isfinite(new) or new < old - slack) and halvings < settings.max_halvings:
                candidate = _state_between(state, candidate, ds, fam, pen)
                new = candidate.objective
                halvings += 1
            if not np.isfinite(new) or new < old - slack:
                logger.debug(f"Step-halving exhausted at iteration {state.iteration}")
                return _IrlsOutcome(state, abs(new - old) <= settings.tol * (abs(old) + 0.1), True)
            if halvings:
                logger.debug(f"Accepted step after {halvings} halvings")
        state = candidate
        if old is not None and abs(new - old) / (abs(new) + 0.1) < settings.tol:
            converged = True
            break
    return _IrlsOutcome(state, converged)


# ----------------------------------------------------------------------
# fit results


@dataclass(frozen=True)
class FitResult:
    """
    Immutable result of a grouped GLM fit.

    Attributes:
        estimator: Estimator tag (glm, fe, regfe, ri-mlm, bc-ri, bc-regfe)
        beta_hat: Coefficients of the original design columns
        alpha_hat: Coefficients of the bias-correction columns (empty otherwise)
        gamma_hat: G x d group coefficients; +-inf marks excluded or separated groups
        theta_hat: Dispersion (sigma^2 for Gaussian, 1 otherwise)
        converged: Convergence flag
        iterations: Iterations used
        deviance: -2 log-likelihood at the estimates
        objective: Penalized log-likelihood at the estimates
        family: Family with the fitted dispersion
        design: Dataset the fit was computed on (augmented for bias-corrected fits)
        penalty: Penalty used (unpenalized for glm and fe)
        free_groups: Groups whose coefficients were estimated
        reference_group: Label of the pinned group, if any
        separated_groups: Labels of groups without a finite coefficient
        dropped_columns: Columns removed before fitting
        objective_trace: Penalized log-likelihood per accepted iteration
        augmentation: Bias-correction augmentation, when present
        mlm_fit: The MLM fit the penalty or estimates came from, when present
        diagnostics: Free-form notes
    """

    estimator: str
    beta_hat: np.ndarray
    alpha_hat: np.ndarray
    gamma_hat: np.ndarray
    theta_hat: float
    converged: bool
    iterations: int
    deviance: float
    objective: float
    family: FamilySpec
    design: GroupedDataset
    penalty: PenaltySpec
    free_groups: np.ndarray
    reference_group: Optional[Any] = None
    separated_groups: Tuple[Any, ...] = ()
    dropped_columns: Tuple[str, ...] = ()
    objective_trace: Tuple[float, ...] = ()
    augmentation: Optional[AugmentedDataset] = None
    mlm_fit: Optional[Any] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def fixed_coef(self) -> np.ndarray:
        return np.concatenate([self.beta_hat, self.alpha_hat])

    @property
    def column_names(self) -> Tuple[str, ...]:
        return self.design.column_names

    @property
    def beta_names(self) -> Tuple[str, ...]:
        return self.design.column_names[: self.beta_hat.shape[0]]

    @property
    def alpha_names(self) -> Tuple[str, ...]:
        return self.design.column_names[self.beta_hat.shape[0]:]

    @property
    def active_groups(self) -> np.ndarray:
        """Groups with finite coefficients."""
        return np.all(np.isfinite(self.gamma_hat), axis=1)

    def coefficients(self) -> Dict[str, float]:
        """Fixed coefficients by column name."""
        return dict(zip(self.column_names, self.fixed_coef.tolist()))

    def fitted_eta(self) -> np.ndarray:
        """Linear predictor on the fit design (+-inf in separated groups)."""
        gamma = self.gamma_hat[self.design.group_index]
        z = self.design.z
        finite = np.all(np.isfinite(gamma), axis=1)
        eta = self.design.x @ self.fixed_coef
        eta[finite] += np.einsum("nd,nd->n", z[finite], gamma[finite])
        eta[~finite] = gamma[~finite, 0]
        return eta

    def fitted_mean(self) -> np.ndarray:
        return np.asarray(self.family.link_inverse(self.fitted_eta()))

    def predict_mean(self, x: np.ndarray, group_codes: np.ndarray) -> np.ndarray:
        """
        Predicted means for new rows of training groups.

        Args:
            x: Rows of the original (non-augmented) design
            group_codes: Training group code per row

        Returns:
            Mean on the response scale
        """
        x = np.asarray(x, dtype=float)
        group_codes = np.asarray(group_codes, dtype=int)
        if self.augmentation is not None:
            x = np.hstack([x, self.augmentation.augment_rows(x, group_codes)])
        gamma = self.gamma_hat[group_codes]
        z = x[:, list(self.design.z_columns)]
        finite = np.all(np.isfinite(gamma), axis=1)
        eta = x @ self.fixed_coef
        eta[finite] += np.einsum("nd,nd->n", z[finite], gamma[finite])
        eta[~finite] = gamma[~finite, 0]
        return np.asarray(self.family.link_inverse(eta))

    def centered_group_effects(self) -> np.ndarray:
        """
        Per-group intercepts (beta_0 + gamma_g) minus their average.

        Groups without a finite coefficient are NaN and left out of the average.
        """
        intercepts = self.beta_hat[0] + self.gamma_hat[:, 0]
        out = np.full(intercepts.shape, np.nan)
        finite = np.isfinite(intercepts)
        out[finite] = intercepts[finite] - intercepts[finite].mean()
        return out

    def gamma_summary(self) -> Dict[str, Any]:
        """Min/median/max of the estimated group intercepts."""
        reported = self.free_groups & self.active_groups
        values = self.gamma_hat[reported, 0]
        summary: Dict[str, Any] = {
            "n_effects": int(reported.sum()),
            "min": float(values.min()) if values.size else None,
            "median": float(np.median(values)) if values.size else None,
            "max": float(values.max()) if values.size else None,
            "reference_group": _plain(self.reference_group),
            "separated_groups": [_plain(label) for label in self.separated_groups],
        }
        if self.mlm_fit is not None:
            summary["omega_sq_at_boundary"] = bool(self.mlm_fit.at_boundary)
        return summary


def _plain(value: Any) -> Any:
    return value.item() if isinstance(value, np.generic) else value


# ----------------------------------------------------------------------
# estimators


def _split_fixed(ds: GroupedDataset, fixed: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n_alpha = int(ds.diagnostics.get("n_alpha", 0))
    n_beta = ds.n_fixed - n_alpha
    return fixed[:n_beta].copy(), fixed[n_beta:].copy()


def fit_glm(ds: GroupedDataset, fam: FamilySpec, settings: Optional[EstimationConfig] = None) -> FitResult:
    """
    Pooled GLM on X alone (no group terms).

    The start values of every other fitter come from here.
    """
    fam.check_support(ds.y)
    no_groups = np.zeros(ds.n_groups, dtype=bool)
    outcome = run_irls(ds, fam, PenaltySpec.unpenalized(), no_groups, settings=settings)
    state = outcome.state
    if fam.estimates_dispersion:
        fam = fam.with_dispersion(float(np.mean((ds.y - state.eta) ** 2)))
    gamma = np.zeros((ds.n_groups, ds.n_random))
    loglik = penalized_objective(ds, fam, state.fixed, gamma)
    beta, alpha = _split_fixed(ds, state.fixed)
    fit_logger.log_fit("glm", outcome.converged, state.iteration)
    return FitResult(
        estimator="glm", beta_hat=beta, alpha_hat=alpha, gamma_hat=gamma, theta_hat=fam.dispersion,
        converged=outcome.converged, iterations=state.iteration, deviance=-2.0 * loglik, objective=loglik,
        family=fam, design=ds, penalty=PenaltySpec.unpenalized(), free_groups=no_groups,
        objective_trace=state.objective_trace,
    )


def degenerate_groups(ds: GroupedDataset, fam: FamilySpec) -> np.ndarray:
    """
    Sign of the divergent intercept per group: +1 all-ones, -1 all-zeros, 0 otherwise.

    Bernoulli groups with a constant outcome and Poisson groups of zeros have
    no finite fixed-effect intercept.
    """
    sign = np.zeros(ds.n_groups, dtype=int)
    if fam.family_kind == FamilyKind.GAUSSIAN:
        return sign
    sums = ds.group_sums(ds.y)
    sign[sums == 0] = -1
    if fam.family_kind == FamilyKind.BERNOULLI:
        sign[sums == ds.group_sizes] = 1
    return sign


def _start_state(ds: GroupedDataset, fam: FamilySpec, start: Optional[Tuple[np.ndarray, np.ndarray]],
                 settings: Optional[EstimationConfig]) -> IrlsState:
    if start is not None:
        fixed, gamma = start
        gamma = np.where(np.isfinite(gamma), gamma, 0.0)
        return initial_state(ds, fam, np.asarray(fixed, dtype=float), gamma)
    pooled = fit_glm(ds, fam, settings)
    return initial_state(ds, fam, pooled.fixed_coef)


def _fit_pinned(ds: GroupedDataset, fam: FamilySpec, estimator: str, pen: PenaltySpec,
                start: Optional[Tuple[np.ndarray, np.ndarray]], settings: Optional[EstimationConfig],
                estimate_dispersion: bool) -> FitResult:
    """Unpenalized group-coefficient fit with a pinned reference group."""
    settings = settings or get_config().estimation
    fam.check_support(ds.y)
    sign = degenerate_groups(ds, fam)
    kept = np.flatnonzero(sign == 0)
    if kept.size == 0:
        raise IdentifiabilityError("Every group has a degenerate outcome; no fixed effects are estimable")
    if sign.any():
        logger.info(f"{int((sign != 0).sum())} groups with degenerate outcomes excluded from the {estimator} fit")

    sub = ds.resample_groups(kept) if kept.size < ds.n_groups else ds
    free = np.ones(kept.size, dtype=bool)
    free[0] = False
    reference = ds.group_labels[kept[0]]

    sub_start = None
    if start is not None:
        sub_start = (start[0], np.asarray(start[1])[kept])
    state0 = _start_state(sub, fam, sub_start, settings)
    state0 = replace(state0, gamma=np.where(free[:, None], state0.gamma, 0.0))
    outcome = run_irls(sub, fam, pen, free, state0, settings)
    state = outcome.state

    gamma = np.zeros((ds.n_groups, ds.n_random))
    gamma[kept] = state.gamma
    separated = sign != 0
    if fam.family_kind == FamilyKind.BERNOULLI:
        runaway = np.zeros(ds.n_groups, dtype=bool)
        runaway[kept] = np.abs(state.gamma[:, 0]) > settings.separation_threshold
        sign = np.where(runaway, np.sign(gamma[:, 0]).astype(int), sign)
        separated |= runaway
    gamma[separated] = sign[separated, None] * np.inf

    if estimate_dispersion and fam.estimates_dispersion:
        fam = fam.with_dispersion(float(np.mean((sub.y - state.eta) ** 2)))
    objective = penalized_objective(ds, fam, state.fixed, gamma)
    beta, alpha = _split_fixed(ds, state.fixed)
    separated_labels = tuple(ds.group_labels[separated].tolist())
    fit_logger.log_fit(estimator, outcome.converged, state.iteration, separated_groups=len(separated_labels))
    diagnostics: Dict[str, Any] = {"halving_failed": outcome.halving_failed}
    # X columns that are also Z columns stay in X; their Z copy is pinned with the reference group
    pinned_slopes = [ds.column_names[j] for j in ds.z_columns[1:]]
    if pinned_slopes:
        diagnostics["reference_pinned_slopes"] = pinned_slopes
    return FitResult(
        estimator=estimator, beta_hat=beta, alpha_hat=alpha, gamma_hat=gamma, theta_hat=fam.dispersion,
        converged=outcome.converged, iterations=state.iteration, deviance=-2.0 * objective, objective=objective,
        family=fam, design=ds, penalty=pen, free_groups=np.isin(np.arange(ds.n_groups), kept[1:]),
        reference_group=reference, separated_groups=separated_labels, objective_trace=state.objective_trace,
        diagnostics=diagnostics,
    )


def fit_fe(ds: GroupedDataset, fam: FamilySpec, start: Optional[Tuple[np.ndarray, np.ndarray]] = None,
           settings: Optional[EstimationConfig] = None) -> FitResult:
    """
    Group fixed effects by joint maximum likelihood.

    The first group with a non-degenerate outcome is the reference group and
    its coefficients are pinned at zero. Groups with a degenerate outcome are
    excluded and get +-inf sentinels, as do Bernoulli groups whose estimated
    intercept runs past the separation threshold. Gaussian sigma^2 is RSS / N.

    Args:
        ds: Dataset
        fam: Family
        start: Optional (fixed, gamma) warm start
        settings: IRLS settings (default: global configuration)

    Returns:
        FitResult tagged "fe"
    """
    return _fit_pinned(ds, fam, "fe", PenaltySpec.unpenalized(), start, settings, estimate_dispersion=True)


def fit_regfe(ds: GroupedDataset, fam: FamilySpec, pen: PenaltySpec,
              start: Optional[Tuple[np.ndarray, np.ndarray]] = None,
              settings: Optional[EstimationConfig] = None, estimator: str = "regfe") -> FitResult:
    """
    Regularized fixed effects: maximize p_GLM(Y | beta, gamma) p(gamma | Omega).

    (theta, Omega) are supplied by the caller, usually from an MLM fit. A zero
    penalty leaves gamma unidentified, so that case pins a reference group
    exactly like fit_fe.

    Args:
        ds: Dataset
        fam: Family; a Gaussian dispersion is taken from pen.scale
        pen: Penalty
        start: Optional (fixed, gamma) warm start
        settings: IRLS settings
        estimator: Tag recorded on the result

    Returns:
        FitResult
    """
    if pen.is_zero:
        return _fit_pinned(ds, fam, estimator, pen, start, settings, estimate_dispersion=False)
    if fam.estimates_dispersion:
        fam = fam.with_dispersion(pen.scale)
    fam.check_support(ds.y)
    pen.block(ds.n_random)
    state0 = _start_state(ds, fam, start, settings)
    outcome = run_irls(ds, fam, pen, None, state0, settings)
    state = outcome.state
    loglik = penalized_objective(ds, fam, state.fixed, state.gamma)
    beta, alpha = _split_fixed(ds, state.fixed)
    fit_logger.log_fit(estimator, outcome.converged, state.iteration)
    return FitResult(
        estimator=estimator, beta_hat=beta, alpha_hat=alpha, gamma_hat=state.gamma, theta_hat=fam.dispersion,
        converged=outcome.converged, iterations=state.iteration, deviance=-2.0 * loglik,
        objective=state.objective if state.objective is not None else loglik,
        family=fam, design=ds, penalty=pen, free_groups=np.ones(ds.n_groups, dtype=bool),
        objective_trace=state.objective_trace, diagnostics={"halving_failed": outcome.halving_failed},
    )


def objective_gradient(fit: FitResult, step: float = 1e-6) -> np.ndarray:
    """
    Central-difference gradient of the penalized objective at a fit.

    Covers the fixed coefficients and the free, finite group coefficients.
    """
    ds, fam, pen = fit.design, fit.family, fit.penalty
    fixed = fit.fixed_coef
    gamma = fit.gamma_hat.copy()
    movable = fit.free_groups & fit.active_groups
    coords = [("f", j) for j in range(fixed.shape[0])]
    coords += [("g", (g, k)) for g in np.flatnonzero(movable) for k in range(ds.n_random)]
    grad = np.empty(len(coords))
    for idx, (kind, where) in enumerate(coords):
        values = []
        for sign in (1.0, -1.0):
            f, gm = fixed.copy(), gamma.copy()
            if kind == "f":
                h = step * (1.0 + abs(f[where]))
                f[where] += sign * h
            else:
                h = step * (1.0 + abs(gm[where]))
                gm[where] += sign * h
            values.append(penalized_objective(ds, fam, f, gm, pen))
        grad[idx] = (values[0] - values[1]) / (2.0 * h)
    return grad


def stationarity_violation(fit: FitResult) -> float:
    """
    Max-norm of the objective gradient relative to 1 + |objective|.

    MLM fits record the projected score of their integrated likelihood under
    diagnostics["stationarity"] when they are fit; that value is returned.
    """
    recorded = fit.diagnostics.get("stationarity")
    if recorded is not None:
        return float(recorded)
    return float(np.max(np.abs(objective_gradient(fit))) / (1.0 + abs(fit.objective)))


def model_based_covariance(fit: FitResult) -> np.ndarray:
    """
    Default covariance s(theta) (U'WU + S)^-1 of the fixed coefficients.

    Args:
        fit: Converged IRLS fit

    Returns:
        Covariance matrix over beta and alpha
    """
    ds = fit.design
    active = fit.active_groups
    sub = ds.resample_groups(np.flatnonzero(active)) if not active.all() else ds
    gamma = fit.gamma_hat[active]
    eta = linear_predictor(sub, fit.fixed_coef, gamma)
    weights = np.maximum(fit.family.irls_weight(eta), WEIGHT_FLOOR)
    system = ArrowheadSystem(sub, weights, fit.penalty.block(ds.n_random), fit.free_groups[active])
    return fit.family.scale * system.fixed_inverse()
