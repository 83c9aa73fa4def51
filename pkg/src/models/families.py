"""
GLM families and link functions.

A FamilySpec bundles the link h, its inverse, the variance function v, the
scale function s and the per-observation log-likelihood. Every estimator is
written against this (h, v, s) contract; only canonical family/link pairs are
exposed. All functions accept scalars or numpy arrays.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np
from scipy.special import expit, gammaln, logit

from ..utils.exceptions import DomainError

ArrayLike = Union[float, np.ndarray]

LOG_2PI = float(np.log(2.0 * np.pi))


class FamilyKind(str, Enum):
    """Outcome distribution."""
    GAUSSIAN = "gaussian"
    BERNOULLI = "bernoulli"
    POISSON = "poisson"


class LinkKind(str, Enum):
    """Link function."""
    IDENTITY = "identity"
    LOGIT = "logit"
    LOG = "log"


CANONICAL_LINKS = {
    FamilyKind.GAUSSIAN: LinkKind.IDENTITY,
    FamilyKind.BERNOULLI: LinkKind.LOGIT,
    FamilyKind.POISSON: LinkKind.LOG,
}


@dataclass(frozen=True)
class FamilySpec:
    """
    A GLM family with its link.

    Attributes:
        family_kind: Outcome distribution
        link_kind: Link function, must be the canonical link of family_kind
        dispersion: theta; sigma^2 for Gaussian, exactly 1 otherwise
    """

    family_kind: FamilyKind
    link_kind: LinkKind
    dispersion: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family_kind", FamilyKind(self.family_kind))
        object.__setattr__(self, "link_kind", LinkKind(self.link_kind))
        expected = CANONICAL_LINKS[self.family_kind]
        if self.link_kind != expected:
            raise DomainError(
                f"{self.family_kind.value} pairs only with the {expected.value} link, got {self.link_kind.value}"
            )
        if self.family_kind == FamilyKind.GAUSSIAN:
            if not (np.isfinite(self.dispersion) and self.dispersion > 0):
                raise DomainError(f"Gaussian dispersion must be positive, got {self.dispersion}")
        elif self.dispersion != 1.0:
            raise DomainError(f"{self.family_kind.value} dispersion is fixed at 1, got {self.dispersion}")

    @classmethod
    def gaussian(cls, sigma_sq: float = 1.0) -> "FamilySpec":
        return cls(FamilyKind.GAUSSIAN, LinkKind.IDENTITY, float(sigma_sq))

    @classmethod
    def bernoulli(cls) -> "FamilySpec":
        return cls(FamilyKind.BERNOULLI, LinkKind.LOGIT)

    @classmethod
    def poisson(cls) -> "FamilySpec":
        return cls(FamilyKind.POISSON, LinkKind.LOG)

    @classmethod
    def from_name(cls, name: str) -> "FamilySpec":
        """Build the canonical family for a name such as ``"bernoulli"``."""
        aliases = {"binomial": "bernoulli", "logistic": "bernoulli", "normal": "gaussian"}
        try:
            kind = FamilyKind(aliases.get(name.lower(), name.lower()))
        except ValueError:
            raise DomainError(f"Unknown family '{name}'; expected one of {[k.value for k in FamilyKind]}")
        return cls(kind, CANONICAL_LINKS[kind])

    def with_dispersion(self, dispersion: float) -> "FamilySpec":
        """Return a copy with a new dispersion (Gaussian only)."""
        if self.family_kind != FamilyKind.GAUSSIAN:
            return self
        return FamilySpec(self.family_kind, self.link_kind, float(dispersion))

    @property
    def name(self) -> str:
        return self.family_kind.value

    @property
    def estimates_dispersion(self) -> bool:
        return self.family_kind == FamilyKind.GAUSSIAN

    @property
    def scale(self) -> float:
        """s(theta): sigma^2 for Gaussian, 1 for Bernoulli and Poisson."""
        return float(self.dispersion) if self.family_kind == FamilyKind.GAUSSIAN else 1.0

    # ------------------------------------------------------------------
    # link side

    def _check_mu(self, mu: np.ndarray):
        if self.link_kind == LinkKind.LOGIT:
            bad = ~((mu > 0.0) & (mu < 1.0))
            if np.any(bad):
                raise DomainError(f"logit link requires mu in (0, 1); got {np.asarray(mu)[bad][:3]}")
        elif self.link_kind == LinkKind.LOG:
            bad = ~(mu > 0.0)
            if np.any(bad):
                raise DomainError(f"log link requires mu > 0; got {np.asarray(mu)[bad][:3]}")
        elif not np.all(np.isfinite(mu)):
            raise DomainError("identity link requires finite mu")

    def link(self, mu: ArrayLike) -> ArrayLike:
        """eta = h(mu)."""
        mu = np.asarray(mu, dtype=float)
        self._check_mu(mu)
        if self.link_kind == LinkKind.LOGIT:
            out = logit(mu)
        elif self.link_kind == LinkKind.LOG:
            out = np.log(mu)
        else:
            out = mu.copy()
        return out[()] if out.ndim == 0 else out

    def link_inverse(self, eta: ArrayLike) -> ArrayLike:
        """mu = h^-1(eta); the logit branch never overflows."""
        eta = np.asarray(eta, dtype=float)
        if self.link_kind == LinkKind.LOGIT:
            out = expit(eta)
        elif self.link_kind == LinkKind.LOG:
            out = np.exp(eta)
        else:
            out = eta.copy()
        return out[()] if out.ndim == 0 else out

    def link_derivative(self, mu: ArrayLike) -> ArrayLike:
        """h'(mu)."""
        mu = np.asarray(mu, dtype=float)
        self._check_mu(mu)
        if self.link_kind == LinkKind.LOGIT:
            out = 1.0 / (mu * (1.0 - mu))
        elif self.link_kind == LinkKind.LOG:
            out = 1.0 / mu
        else:
            out = np.ones_like(mu)
        return out[()] if out.ndim == 0 else out

    def variance_fn(self, mu: ArrayLike) -> ArrayLike:
        """v(mu): 1, mu(1 - mu) or mu."""
        mu = np.asarray(mu, dtype=float)
        self._check_mu(mu)
        if self.family_kind == FamilyKind.BERNOULLI:
            out = mu * (1.0 - mu)
        elif self.family_kind == FamilyKind.POISSON:
            out = mu.copy()
        else:
            out = np.ones_like(mu)
        return out[()] if out.ndim == 0 else out

    # ------------------------------------------------------------------
    # likelihood side, parameterized by eta so saturated fits stay finite

    def check_support(self, y: ArrayLike):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DomainError("outcome contains non-finite values")
        if self.family_kind == FamilyKind.BERNOULLI:
            if np.any((y != 0.0) & (y != 1.0)):
                raise DomainError("Bernoulli outcome must be 0 or 1")
        elif self.family_kind == FamilyKind.POISSON:
            if np.any((y < 0.0) | (y != np.floor(y))):
                raise DomainError("Poisson outcome must be a non-negative integer")

    def loglik_obs(self, y: ArrayLike, eta: ArrayLike, check: bool = True) -> ArrayLike:
        """log p(y | eta, theta) including normalizing constants."""
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if check:
            self.check_support(y)
        if self.family_kind == FamilyKind.BERNOULLI:
            out = y * eta - np.logaddexp(0.0, eta)
        elif self.family_kind == FamilyKind.POISSON:
            out = y * eta - np.exp(eta) - gammaln(y + 1.0)
        else:
            sigma_sq = self.dispersion
            out = -0.5 * (LOG_2PI + np.log(sigma_sq)) - (y - eta) ** 2 / (2.0 * sigma_sq)
        return out[()] if np.ndim(out) == 0 else out

    def eta_score(self, y: ArrayLike, eta: ArrayLike) -> ArrayLike:
        """d loglik / d eta = (y - mu) / (s(theta) v(mu) h'(mu))."""
        mu = self.link_inverse(eta)
        # canonical links: v(mu) h'(mu) == 1
        return (np.asarray(y, dtype=float) - mu) / self.scale

    def eta_information(self, eta: ArrayLike) -> ArrayLike:
        """-d^2 loglik / d eta^2 = 1 / (s(theta) h'(mu)^2 v(mu)), exact for canonical links."""
        return self.irls_weight(eta) / self.scale

    def irls_weight(self, eta: ArrayLike) -> ArrayLike:
        """IRLS weight [h'(mu)]^-2 [v(mu)]^-1 evaluated without forming h'."""
        mu = np.asarray(self.link_inverse(eta), dtype=float)
        if self.family_kind == FamilyKind.BERNOULLI:
            out = mu * (1.0 - mu)
        elif self.family_kind == FamilyKind.POISSON:
            out = mu.copy()
        else:
            out = np.ones_like(mu)
        return out[()] if out.ndim == 0 else out

    def initial_mean(self, y: np.ndarray) -> np.ndarray:
        """Starting fitted means strictly inside the link range."""
        y = np.asarray(y, dtype=float)
        if self.family_kind == FamilyKind.BERNOULLI:
            return (y + 0.5) / 2.0
        if self.family_kind == FamilyKind.POISSON:
            return y + 0.1
        return y.copy()
