"""
Multilevel (random-effects) GLM by maximum likelihood.

The random-intercept model integrates gamma_g ~ N(0, omega^2) out of each
group's likelihood with adaptive Gauss-Hermite quadrature (one node is the
Laplace approximation); the Gaussian identity case uses the exact marginal
normal density instead. (beta, log omega^2[, log sigma^2]) are found by
L-BFGS-B on central-difference gradients followed by Newton polishing, and the
Hessian at the optimum gives the default standard errors (the GLS variance
for Gaussian identity). Random slopes are available through a Laplace
approximation with a log-Cholesky Omega.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import optimize
from scipy.special import logsumexp

from ..data_processing.grouped_data import GroupedDataset
from ..utils.config import QuadratureConfig, get_config
from ..utils.exceptions import DataValidationError, IndefiniteHessianError, QuadratureError
from ..utils.logger import get_logger
from .families import LOG_2PI, FamilyKind, FamilySpec
from .irls import FitResult, PenaltySpec, fit_glm

logger = logging.getLogger(__name__)
fit_logger = get_logger(__name__)

LOG_OMEGA_SQ_BOUNDS = (float(np.log(1e-12)), float(np.log(1e4)))
MODE_GRAD_TOL = 1e-11
PENALTY_FLOOR = 1e-8


@dataclass(frozen=True)
class QuadratureSpec:
    """
    Gauss-Hermite rule for the random-intercept integral.

    Attributes:
        n_nodes: Number of nodes; 1 with adaptive=True is the Laplace approximation
        adaptive: Center nodes at each group's posterior mode and scale by its curvature
    """

    n_nodes: int = 25
    adaptive: bool = True

    def __post_init__(self):
        if int(self.n_nodes) < 1:
            raise ValueError(f"n_nodes must be at least 1, got {self.n_nodes}")

    @classmethod
    def from_config(cls, settings: Optional[QuadratureConfig] = None) -> "QuadratureSpec":
        settings = settings or get_config().quadrature
        return cls(settings.n_nodes, settings.adaptive)

    def rule(self) -> Tuple[np.ndarray, np.ndarray]:
        return hermgauss(int(self.n_nodes))


@dataclass(frozen=True)
class MlmFit:
    """
    Maximum likelihood fit of a multilevel GLM.

    Attributes:
        beta_hat: Fixed coefficients over all design columns
        omega: Random-effect covariance (1 x 1 for a random intercept)
        theta_hat: Dispersion (sigma^2 for Gaussian, 1 otherwise)
        gamma_hat: G x d posterior modes
        hessian: Hessian of the log integrated likelihood over the optimizer parameters
        converged: Convergence flag
        loglik: Log integrated likelihood at the optimum
        iterations: Outer iterations
        at_boundary: Omega estimated at the boundary (omega^2 = 0)
        param_names: Names of the optimizer parameters (hessian order)
        design: Dataset the fit was computed on
        family: Family with the fitted dispersion
        method: "gaussian-exact", "quadrature" or "laplace"
    """

    beta_hat: np.ndarray
    omega: np.ndarray
    theta_hat: float
    gamma_hat: np.ndarray
    hessian: np.ndarray
    converged: bool
    loglik: float
    iterations: int
    at_boundary: bool
    param_names: Tuple[str, ...]
    design: GroupedDataset
    family: FamilySpec
    method: str = "quadrature"
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def omega_sq_hat(self) -> float:
        return float(self.omega[0, 0])

    def to_fit_result(self, estimator: str = "ri-mlm", augmentation=None) -> FitResult:
        """Express the MLM estimates as a FitResult (gamma = posterior modes)."""
        ds = self.design
        n_alpha = int(ds.diagnostics.get("n_alpha", 0))
        n_beta = ds.n_fixed - n_alpha
        return FitResult(
            estimator=estimator, beta_hat=self.beta_hat[:n_beta].copy(), alpha_hat=self.beta_hat[n_beta:].copy(),
            gamma_hat=self.gamma_hat, theta_hat=self.theta_hat, converged=self.converged,
            iterations=self.iterations, deviance=-2.0 * self.loglik, objective=self.loglik, family=self.family,
            design=ds, penalty=penalty_from_mlm(self), free_groups=np.ones(ds.n_groups, dtype=bool),
            augmentation=augmentation, mlm_fit=self,
            diagnostics={"method": self.method, "stationarity": self.diagnostics.get("stationarity")},
        )


# ----------------------------------------------------------------------
# random-intercept integrals


def _group_h(ds: GroupedDataset, fam: FamilySpec, eta: np.ndarray, gamma: np.ndarray,
             omega_sq: float) -> np.ndarray:
    """log p(Y_g | gamma_g) + log N(gamma_g; 0, omega^2) per group."""
    loglik = ds.group_sums(fam.loglik_obs(ds.y, eta + gamma[ds.group_index], check=False))
    return loglik - 0.5 * (np.log(2.0 * np.pi * omega_sq) + gamma ** 2 / omega_sq)


def ri_modes(ds: GroupedDataset, fam: FamilySpec, eta: np.ndarray, omega_sq: float,
             start: Optional[np.ndarray] = None, max_iter: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-group posterior modes of gamma by batched safeguarded Newton.

    Returns:
        (modes, curvature) where curvature is -d^2 h / d gamma^2 at the mode
    """
    gamma = np.zeros(ds.n_groups) if start is None else np.array(start, dtype=float)
    h_old = _group_h(ds, fam, eta, gamma, omega_sq)
    for _ in range(max_iter):
        e = eta + gamma[ds.group_index]
        grad = ds.group_sums(fam.eta_score(ds.y, e)) - gamma / omega_sq
        info = ds.group_sums(fam.eta_information(e)) + 1.0 / omega_sq
        if np.max(np.abs(grad)) <= MODE_GRAD_TOL:
            return gamma, info
        step = grad / info
        candidate = gamma + step
        h_new = _group_h(ds, fam, eta, candidate, omega_sq)
        for _ in range(30):
            worse = ~(h_new >= h_old - 1e-12 * (1.0 + np.abs(h_old)))
            if not worse.any():
                break
            step[worse] *= 0.5
            candidate = gamma + step
            h_new = _group_h(ds, fam, eta, candidate, omega_sq)
        gamma, h_old = candidate, h_new
    e = eta + gamma[ds.group_index]
    info = ds.group_sums(fam.eta_information(e)) + 1.0 / omega_sq
    return gamma, info


def _gaussian_group_loglik(ds: GroupedDataset, resid: np.ndarray, omega_sq: float,
                           sigma_sq: float) -> np.ndarray:
    n = ds.group_sizes.astype(float)
    s_r = ds.group_sums(resid)
    q = ds.group_sums(resid ** 2)
    den = sigma_sq + n * omega_sq
    quad_form = (q - omega_sq * s_r ** 2 / den) / sigma_sq
    return -0.5 * (n * LOG_2PI + (n - 1.0) * np.log(sigma_sq) + np.log(den) + quad_form)


def _gauss_hermite(ds: GroupedDataset, fam: FamilySpec, eta: np.ndarray, omega_sq: float,
                   center: np.ndarray, spread: np.ndarray, quad: QuadratureSpec) -> np.ndarray:
    nodes, weights = quad.rule()
    gam = center[:, None] + np.sqrt(2.0) * spread[:, None] * nodes[None, :]
    e = eta[:, None] + gam[ds.group_index]
    loglik = np.add.reduceat(fam.loglik_obs(ds.y[:, None], e, check=False), ds.group_starts, axis=0)
    h = loglik - 0.5 * (np.log(2.0 * np.pi * omega_sq) + gam ** 2 / omega_sq)
    terms = np.log(weights)[None, :] + nodes[None, :] ** 2 + h
    return np.log(np.sqrt(2.0) * spread) + logsumexp(terms, axis=1)


def group_integrated_loglik(ds: GroupedDataset, fam: FamilySpec, beta: np.ndarray, omega_sq: float,
                            quad: Optional[QuadratureSpec] = None,
                            mode_start: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-group log integrated likelihood; see integrated_loglik."""
    if not ds.is_random_intercept:
        raise DataValidationError("The quadrature likelihood needs an intercept-only Z; use fit_mlm_laplace")
    quad = quad or QuadratureSpec.from_config()
    eta = ds.x @ beta
    if omega_sq < 0:
        raise ValueError(f"omega^2 must be non-negative, got {omega_sq}")
    if omega_sq == 0:
        return ds.group_sums(fam.loglik_obs(ds.y, eta, check=False))
    if fam.family_kind == FamilyKind.GAUSSIAN:
        return _gaussian_group_loglik(ds, ds.y - eta, omega_sq, fam.dispersion)

    if quad.adaptive:
        center, info = ri_modes(ds, fam, eta, omega_sq, mode_start)
        spread = 1.0 / np.sqrt(info)
    else:
        center = np.zeros(ds.n_groups)
        spread = np.full(ds.n_groups, np.sqrt(omega_sq))
    values = _gauss_hermite(ds, fam, eta, omega_sq, center, spread, quad)

    bad = ~np.isfinite(values)
    if bad.any():
        logger.debug(f"Re-centering quadrature for {int(bad.sum())} groups")
        center, info = ri_modes(ds, fam, eta, omega_sq, None, max_iter=500)
        spread = 1.0 / np.sqrt(info)
        retry = _gauss_hermite(ds, fam, eta, omega_sq, center, spread, quad)
        values[bad] = retry[bad]
        if not np.all(np.isfinite(values)):
            raise QuadratureError(
                f"Integrand is not finite for groups {ds.group_labels[~np.isfinite(values)][:10].tolist()}"
            )
    return values


def integrated_loglik(ds: GroupedDataset, fam: FamilySpec, beta: np.ndarray, omega_sq: float,
                      theta: Optional[float] = None, quad: Optional[QuadratureSpec] = None) -> float:
    """
    Log integrated likelihood of the random-intercept model.

    Sum over groups of log integral prod_i p(y_i | eta_i + gamma) N(gamma; 0, omega^2) dgamma,
    by adaptive Gauss-Hermite quadrature, exactly for Gaussian identity, and
    as the plain log-likelihood at gamma = 0 when omega^2 = 0.

    Args:
        ds: Dataset with intercept-only Z
        fam: Family
        beta: Fixed coefficients
        omega_sq: Random-intercept variance (>= 0)
        theta: Dispersion override (Gaussian sigma^2)
        quad: Quadrature rule

    Returns:
        Log integrated likelihood
    """
    if theta is not None:
        fam = fam.with_dispersion(theta)
    return float(np.sum(group_integrated_loglik(ds, fam, np.asarray(beta, dtype=float), float(omega_sq), quad)))


def log_posterior_gamma(ds: GroupedDataset, fam: FamilySpec, beta: np.ndarray, omega_sq: float,
                        gamma: np.ndarray, quad: Optional[QuadratureSpec] = None) -> float:
    """log p(gamma | Y, beta, theta, omega^2) summed over groups."""
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    h = _group_h(ds, fam, ds.x @ beta, gamma, omega_sq)
    return float(np.sum(h - group_integrated_loglik(ds, fam, beta, omega_sq, quad)))


# ----------------------------------------------------------------------
# outer optimization


def fd_gradient(func: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    """Central differences with step * (1 + |x_j|)."""
    grad = np.empty_like(x)
    for j in range(x.shape[0]):
        h = step * (1.0 + abs(x[j]))
        up, down = x.copy(), x.copy()
        up[j] += h
        down[j] -= h
        grad[j] = (func(up) - func(down)) / (2.0 * h)
    return grad


def fd_hessian(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float) -> np.ndarray:
    """Symmetrized central differences of a gradient."""
    k = x.shape[0]
    hess = np.empty((k, k))
    for j in range(k):
        h = step * (1.0 + abs(x[j]))
        up, down = x.copy(), x.copy()
        up[j] += h
        down[j] -= h
        hess[:, j] = (grad_fn(up) - grad_fn(down)) / (2.0 * h)
    return 0.5 * (hess + hess.T)


@dataclass
class _Optimum:
    x: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str


def _projected(grad: np.ndarray, x: np.ndarray, bounds: Sequence[Tuple[Optional[float], Optional[float]]]) -> np.ndarray:
    """Gradient of a minimization with components pushing into an active bound zeroed."""
    out = grad.copy()
    for j, (lo, hi) in enumerate(bounds):
        if lo is not None and x[j] <= lo + 1e-10 and grad[j] > 0:
            out[j] = 0.0
        if hi is not None and x[j] >= hi - 1e-10 and grad[j] < 0:
            out[j] = 0.0
    return out


def score_violation(grad: np.ndarray, loglik: float) -> float:
    """Max-norm of a (projected) log-likelihood gradient relative to 1 + |loglik|."""
    return float(np.max(np.abs(grad)) / (1.0 + abs(loglik)))


def _minimize(objective: Callable[[np.ndarray], float], x0: np.ndarray,
              bounds: Sequence[Tuple[Optional[float], Optional[float]]],
              settings: QuadratureConfig, gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
              polish_steps: int = 5) -> _Optimum:
    """L-BFGS-B followed by a few bounded Newton steps."""
    if gradient is None:
        def gradient(x):
            return fd_gradient(objective, x, settings.grad_step)

    result = optimize.minimize(
        objective, x0, jac=gradient, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": settings.max_outer_iter, "ftol": 1e-14, "gtol": 1e-9, "maxls": 50},
    )
    x = np.asarray(result.x, dtype=float)
    value = float(result.fun)
    grad = gradient(x)
    iterations = int(result.nit)

    lower = np.array([-np.inf if lo is None else lo for lo, _ in bounds])
    upper = np.array([np.inf if hi is None else hi for _, hi in bounds])
    for _ in range(polish_steps):
        pg = _projected(grad, x, bounds)
        if np.max(np.abs(pg)) <= 1e-8 * (1.0 + abs(value)):
            break
        hess = fd_hessian(gradient, x, settings.hessian_step)
        try:
            np.linalg.cholesky(hess)
        except np.linalg.LinAlgError:
            break
        candidate = np.clip(x - np.linalg.solve(hess, pg), lower, upper)
        candidate_value = objective(candidate)
        if not candidate_value <= value:
            break
        x, value = candidate, float(candidate_value)
        grad = gradient(x)
        iterations += 1

    pg = _projected(grad, x, bounds)
    converged = bool(result.success) or bool(np.max(np.abs(pg)) <= 1e-6 * (1.0 + abs(value)))
    if not converged and result.nit >= settings.max_outer_iter:
        logger.warning(f"Outer optimizer stopped after {result.nit} iterations: {result.message}")
    return _Optimum(x, value, grad, iterations, converged, str(result.message))


def _gaussian_gradient(ds: GroupedDataset, beta: np.ndarray, omega_sq: float, sigma_sq: float) -> np.ndarray:
    """Exact gradient of the Gaussian marginal loglik in (beta, log omega^2, log sigma^2)."""
    resid = ds.y - ds.x @ beta
    n = ds.group_sizes.astype(float)
    s_r = ds.group_sums(resid)
    den = sigma_sq + n * omega_sq
    c = omega_sq / den
    v_inv_r = (resid - (c * s_r)[ds.group_index]) / sigma_sq
    d_beta = ds.x.T @ v_inv_r
    d_omega = np.sum(-0.5 * n / den + 0.5 * (s_r / den) ** 2)
    d_sigma = np.sum(-0.5 * ((n - 1.0) / sigma_sq + 1.0 / den)) + 0.5 * np.sum(v_inv_r ** 2)
    return np.concatenate([d_beta, [omega_sq * d_omega, sigma_sq * d_sigma]])


def _gls_cross_products(ds: GroupedDataset, omega_sq: float, sigma_sq: float) -> Tuple[np.ndarray, np.ndarray]:
    """sigma^2 X'V^-1X and sigma^2 X'V^-1y for V_g = sigma^2 I + omega^2 11'."""
    n = ds.group_sizes.astype(float)
    c = omega_sq / (sigma_sq + n * omega_sq)
    sx = ds.group_sums(ds.x)
    sy = ds.group_sums(ds.y)
    xtvx = ds.x.T @ ds.x - np.einsum("g,gp,gq->pq", c, sx, sx)
    xtvy = ds.x.T @ ds.y - np.einsum("g,gp,g->p", c, sx, sy)
    return xtvx, xtvy


def gls_beta(ds: GroupedDataset, omega_sq: float, sigma_sq: float) -> np.ndarray:
    """(X'V^-1X)^-1 X'V^-1 y for V_g = sigma^2 I + omega^2 11'."""
    xtvx, xtvy = _gls_cross_products(ds, omega_sq, sigma_sq)
    return np.linalg.solve(xtvx, xtvy)


def gls_covariance(ds: GroupedDataset, omega_sq: float, sigma_sq: float) -> np.ndarray:
    """(X'V^-1X)^-1 at fixed variance components."""
    xtvx, _ = _gls_cross_products(ds, omega_sq, sigma_sq)
    return sigma_sq * np.linalg.inv(xtvx)


def _require_random_intercept(ds: GroupedDataset):
    if not ds.is_random_intercept:
        raise DataValidationError("fit_ri_mlm needs an intercept-only Z; use fit_mlm_laplace for random slopes")


def fit_ri_mlm(ds: GroupedDataset, fam: FamilySpec, quad: Optional[QuadratureSpec] = None,
               start: Optional[Tuple[np.ndarray, float, float]] = None,
               settings: Optional[QuadratureConfig] = None) -> MlmFit:
    """
    Random-intercept MLM by unrestricted maximum likelihood.

    Args:
        ds: Dataset with intercept-only Z
        fam: Family
        quad: Quadrature rule (ignored for Gaussian identity)
        start: Optional (beta, omega^2, theta) warm start
        settings: Optimizer settings (default: global configuration)

    Returns:
        MlmFit
    """
    _require_random_intercept(ds)
    settings = settings or get_config().quadrature
    quad = quad or QuadratureSpec.from_config(settings)
    fam.check_support(ds.y)
    gaussian = fam.family_kind == FamilyKind.GAUSSIAN
    p = ds.n_fixed

    if start is None:
        pooled = fit_glm(ds, fam)
        beta0 = pooled.fixed_coef
        if gaussian:
            half = max(0.5 * pooled.theta_hat, 1e-6)
            omega0, theta0 = half, half
        else:
            omega0, theta0 = 1.0, 1.0
    else:
        beta0, omega0, theta0 = np.asarray(start[0], dtype=float), max(float(start[1]), 1e-4), float(start[2])

    x0 = np.concatenate([beta0, [np.log(np.clip(omega0, 1e-10, 1e3))]])
    bounds = [(None, None)] * p + [LOG_OMEGA_SQ_BOUNDS]
    names = list(ds.column_names) + ["log_omega_sq"]
    if gaussian:
        x0 = np.concatenate([x0, [np.log(theta0)]])
        bounds.append((None, None))
        names.append("log_sigma_sq")

        def objective(x):
            return -float(np.sum(_gaussian_group_loglik(ds, ds.y - ds.x @ x[:p], np.exp(x[p]), np.exp(x[p + 1]))))

        def gradient(x):
            return -_gaussian_gradient(ds, x[:p], np.exp(x[p]), np.exp(x[p + 1]))
    else:
        def objective(x):
            values = group_integrated_loglik(ds, fam, x[:p], float(np.exp(x[p])), quad)
            return -float(np.sum(values))

        gradient = None

    optimum = _minimize(objective, x0, bounds, settings, gradient)
    x = optimum.x
    omega_sq = float(np.exp(x[p]))
    theta = float(np.exp(x[p + 1])) if gaussian else 1.0
    at_boundary = omega_sq < settings.boundary
    if at_boundary:
        omega_sq = 0.0
    beta = x[:p].copy()
    if gaussian:
        beta = gls_beta(ds, omega_sq, theta)
        x = np.concatenate([beta, x[p:]])
    fitted_fam = fam.with_dispersion(theta)

    grad_fn = gradient or (lambda v: fd_gradient(objective, v, settings.grad_step))
    hessian = -fd_hessian(grad_fn, x, settings.hessian_step)
    loglik = -objective(x) if not at_boundary else integrated_loglik(ds, fitted_fam, beta, 0.0)
    stationarity = score_violation(_projected(grad_fn(x), x, bounds), loglik)

    fit = MlmFit(
        beta_hat=beta, omega=np.array([[omega_sq]]), theta_hat=fitted_fam.dispersion,
        gamma_hat=np.zeros((ds.n_groups, 1)), hessian=hessian, converged=optimum.converged, loglik=loglik,
        iterations=optimum.iterations, at_boundary=at_boundary, param_names=tuple(names), design=ds,
        family=fitted_fam, method="gaussian-exact" if gaussian else "quadrature",
        diagnostics={"optimizer_message": optimum.message, "n_nodes": quad.n_nodes, "adaptive": quad.adaptive,
                     "stationarity": stationarity},
    )
    gamma = posterior_mode_gamma(ds, fitted_fam, fit)
    fit = _with_gamma(fit, gamma)
    fit_logger.log_fit("ri-mlm", fit.converged, fit.iterations, omega_sq=omega_sq, at_boundary=at_boundary)
    return fit


def _with_gamma(fit: MlmFit, gamma: np.ndarray) -> MlmFit:
    return replace(fit, gamma_hat=np.asarray(gamma, dtype=float).reshape(fit.design.n_groups, -1))


def posterior_mode_gamma(ds: GroupedDataset, fam: FamilySpec, fit: MlmFit) -> np.ndarray:
    """
    Posterior modes of the random intercepts at the MLM estimates.

    Maximizes log p(Y_g | beta, gamma) + log N(gamma; 0, omega^2) per group.

    Returns:
        Length-G vector (zeros when omega^2 is at the boundary)
    """
    omega_sq = fit.omega_sq_hat
    if omega_sq <= 0:
        return np.zeros(ds.n_groups)
    gamma, _ = ri_modes(ds, fam.with_dispersion(fit.theta_hat), ds.x @ fit.beta_hat, omega_sq)
    return gamma


def mle_covariance(fit: MlmFit) -> np.ndarray:
    """
    Default covariance of the fixed coefficients.

    Gaussian identity fits use the GLS variance (X'V^-1X)^-1 at the estimated
    (omega^2, sigma^2); other fits use the beta block of -H^-1.

    Raises:
        IndefiniteHessianError: At the omega boundary or when -H is not positive definite
    """
    if fit.at_boundary:
        raise IndefiniteHessianError(
            "omega^2 is estimated at the boundary 0, so the Hessian variance is not available; "
            "use the cluster bootstrap instead"
        )
    if fit.method == "gaussian-exact":
        return gls_covariance(fit.design, fit.omega_sq_hat, fit.theta_hat)
    neg = -fit.hessian
    try:
        np.linalg.cholesky(neg)
    except np.linalg.LinAlgError:
        raise IndefiniteHessianError(
            "Hessian of the integrated likelihood is not negative definite; use the cluster bootstrap instead"
        )
    p = fit.beta_hat.shape[0]
    return np.linalg.inv(neg)[:p, :p]


def mle_hessian_se(fit: MlmFit) -> np.ndarray:
    """Default standard errors of the fixed coefficients; see mle_covariance."""
    return np.sqrt(np.diag(mle_covariance(fit)))


def penalty_from_mlm(fit: MlmFit, floor: float = PENALTY_FLOOR) -> PenaltySpec:
    """
    RegFE penalty from MLM estimates: Omega_hat with scale s(theta_hat).

    A boundary Omega (omega^2 = 0) is floored so the penalty stays positive
    definite; the fit's at_boundary flag records this.
    """
    omega = np.array(fit.omega, dtype=float)
    eigvals, eigvecs = np.linalg.eigh(omega)
    if eigvals.min() < floor:
        omega = (eigvecs * np.maximum(eigvals, floor)) @ eigvecs.T
        omega = 0.5 * (omega + omega.T)
    return PenaltySpec(omega, fit.family.scale)


# ----------------------------------------------------------------------
# Laplace random-slope MLM


def _cholesky_from_params(params: np.ndarray, d: int) -> np.ndarray:
    chol = np.zeros((d, d))
    chol[np.tril_indices(d)] = params
    chol[np.diag_indices(d)] = np.exp(np.diag(chol))
    return chol


def _laplace_modes(ds: GroupedDataset, fam: FamilySpec, eta: np.ndarray, omega_inv: np.ndarray,
                   max_iter: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Batched d-dimensional Newton for the posterior modes; returns (modes, information)."""
    z = ds.z
    gamma = np.zeros((ds.n_groups, ds.n_random))

    def h(g):
        e = eta + np.einsum("nd,nd->n", z, g[ds.group_index])
        return ds.group_sums(fam.loglik_obs(ds.y, e, check=False)) - 0.5 * np.einsum("gd,de,ge->g", g, omega_inv, g)

    h_old = h(gamma)
    info = None
    for _ in range(max_iter):
        e = eta + np.einsum("nd,nd->n", z, gamma[ds.group_index])
        score = fam.eta_score(ds.y, e)
        weight = fam.eta_information(e)
        grad = ds.group_sums(z * score[:, None]) - gamma @ omega_inv
        info = ds.group_sums(np.einsum("nd,ne->nde", z * weight[:, None], z)) + omega_inv[None]
        if np.max(np.abs(grad)) <= MODE_GRAD_TOL:
            return gamma, info
        step = np.linalg.solve(info, grad[:, :, None])[:, :, 0]
        candidate = gamma + step
        h_new = h(candidate)
        for _ in range(30):
            worse = ~(h_new >= h_old - 1e-12 * (1.0 + np.abs(h_old)))
            if not worse.any():
                break
            step[worse] *= 0.5
            candidate = gamma + step
            h_new = h(candidate)
        gamma, h_old = candidate, h_new
    e = eta + np.einsum("nd,nd->n", z, gamma[ds.group_index])
    weight = fam.eta_information(e)
    info = ds.group_sums(np.einsum("nd,ne->nde", z * weight[:, None], z)) + omega_inv[None]
    return gamma, info


def laplace_loglik(ds: GroupedDataset, fam: FamilySpec, beta: np.ndarray, omega: np.ndarray) -> Tuple[float, np.ndarray]:
    """Laplace approximation of the log integrated likelihood with full Omega; returns (value, modes)."""
    d = ds.n_random
    omega_inv = np.linalg.inv(omega)
    _, logdet_omega = np.linalg.slogdet(omega)
    eta = ds.x @ beta
    modes, info = _laplace_modes(ds, fam, eta, omega_inv)
    e = eta + np.einsum("nd,nd->n", ds.z, modes[ds.group_index])
    loglik = ds.group_sums(fam.loglik_obs(ds.y, e, check=False))
    prior = -0.5 * (d * LOG_2PI + logdet_omega + np.einsum("gd,de,ge->g", modes, omega_inv, modes))
    _, logdet_info = np.linalg.slogdet(info)
    value = loglik + prior + 0.5 * d * LOG_2PI - 0.5 * logdet_info
    if not np.all(np.isfinite(value)):
        raise QuadratureError("Laplace approximation produced a non-finite value")
    return float(np.sum(value)), modes


def fit_mlm_laplace(ds: GroupedDataset, fam: FamilySpec, settings: Optional[QuadratureConfig] = None) -> MlmFit:
    """
    Correlated random intercept and slopes by the Laplace approximation (experimental).

    Omega = L L' with L lower triangular and log-parameterized diagonal.

    Args:
        ds: Dataset (any Z)
        fam: Family
        settings: Optimizer settings

    Returns:
        MlmFit with method "laplace"
    """
    settings = settings or get_config().quadrature
    fam.check_support(ds.y)
    gaussian = fam.family_kind == FamilyKind.GAUSSIAN
    p, d = ds.n_fixed, ds.n_random
    n_chol = d * (d + 1) // 2

    pooled = fit_glm(ds, fam)
    chol0 = np.zeros(n_chol)
    diag_positions = [i * (i + 1) // 2 + i for i in range(d)]
    chol0[diag_positions] = np.log(0.5)
    x0 = np.concatenate([pooled.fixed_coef, chol0])
    names = list(ds.column_names) + [f"chol_{i}{j}" for i in range(d) for j in range(i + 1)]
    bounds = [(None, None)] * p + [(None, None)] * n_chol
    for pos in diag_positions:
        bounds[p + pos] = (0.5 * LOG_OMEGA_SQ_BOUNDS[0], 0.5 * LOG_OMEGA_SQ_BOUNDS[1])
    if gaussian:
        x0 = np.concatenate([x0, [np.log(max(0.5 * pooled.theta_hat, 1e-6))]])
        bounds.append((None, None))
        names.append("log_sigma_sq")

    def unpack(x):
        chol = _cholesky_from_params(x[p:p + n_chol], d)
        family = fam.with_dispersion(float(np.exp(x[-1]))) if gaussian else fam
        return x[:p], chol @ chol.T, family

    def objective(x):
        beta, omega, family = unpack(x)
        return -laplace_loglik(ds, family, beta, omega)[0]

    optimum = _minimize(objective, x0, bounds, settings)
    beta, omega, fitted_fam = unpack(optimum.x)
    loglik, modes = laplace_loglik(ds, fitted_fam, beta, omega)
    at_boundary = bool(np.linalg.eigvalsh(omega).min() < settings.boundary)
    hessian = -fd_hessian(lambda v: fd_gradient(objective, v, settings.grad_step), optimum.x, settings.hessian_step)
    score = _projected(fd_gradient(objective, optimum.x, settings.grad_step), optimum.x, bounds)
    fit_logger.log_fit("mlm-laplace", optimum.converged, optimum.iterations, at_boundary=at_boundary)
    return MlmFit(
        beta_hat=beta.copy(), omega=omega, theta_hat=fitted_fam.dispersion, gamma_hat=modes, hessian=hessian,
        converged=optimum.converged, loglik=loglik, iterations=optimum.iterations, at_boundary=at_boundary,
        param_names=tuple(names), design=ds, family=fitted_fam, method="laplace",
        diagnostics={"optimizer_message": optimum.message, "experimental": True,
                     "stationarity": score_violation(score, loglik)},
    )


def fit_mlm(ds: GroupedDataset, fam: FamilySpec, quad: Optional[QuadratureSpec] = None,
            start: Optional[Tuple[np.ndarray, float, float]] = None,
            settings: Optional[QuadratureConfig] = None) -> MlmFit:
    """Random-intercept quadrature fit, or the Laplace fit when Z carries slopes."""
    if ds.is_random_intercept:
        return fit_ri_mlm(ds, fam, quad, start, settings)
    return fit_mlm_laplace(ds, fam, settings)
