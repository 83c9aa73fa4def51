"""
Data-generating processes for the Monte Carlo experiments.

Every draw comes from a counter-based Philox stream keyed by
(seed, process, G, n, replicate, role), so a replicate is reproducible on its
own and adding estimators or replicates never changes data already generated.
Group-level latent variables use the "latent" role; covariates and outcomes
use "train" or "test", which lets a test set share the training groups'
latent effects.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from ..data_processing.grouped_data import INTERCEPT_NAME, GroupedDataset, build_dataset
from ..models.families import FamilySpec
from ..utils.config import NORMAL_PARAMS, get_config
from ..utils.exceptions import ConfigError

logger = logging.getLogger(__name__)

AR1_RHO = 0.75


class DgpKind(str, Enum):
    LOGISTIC_RI = "logistic-ri"
    DGP1 = "dgp1"
    DGP2 = "dgp2"
    POISSON_LOG = "poisson-log"
    POISSON_BIAS = "poisson-bias"
    RANDOM_SLOPE = "random-slope"


class StreamRole(int, Enum):
    LATENT = 0
    TRAIN = 1
    TEST = 2


# stable integer ids for the stream keys; never renumber
STREAM_IDS = {
    DgpKind.LOGISTIC_RI: 1,
    DgpKind.DGP1: 2,
    DgpKind.DGP2: 3,
    DgpKind.POISSON_LOG: 4,
    DgpKind.POISSON_BIAS: 5,
    DgpKind.RANDOM_SLOPE: 6,
}

# latent components that shift a group's intercept
INTERCEPT_LATENT = {
    DgpKind.LOGISTIC_RI: ("gamma",),
    DgpKind.DGP1: ("w1", "w2"),
    DgpKind.DGP2: ("w",),
    DgpKind.POISSON_LOG: ("w",),
    DgpKind.POISSON_BIAS: ("w1", "w2"),
    DgpKind.RANDOM_SLOPE: ("w1",),
}

FAMILIES = {
    DgpKind.LOGISTIC_RI: "bernoulli",
    DgpKind.DGP1: "bernoulli",
    DgpKind.DGP2: "poisson",
    DgpKind.POISSON_LOG: "poisson",
    DgpKind.POISSON_BIAS: "poisson",
    DgpKind.RANDOM_SLOPE: "bernoulli",
}


def covariate_names(kind: DgpKind) -> Tuple[str, ...]:
    return ("x1", "x2") if kind == DgpKind.RANDOM_SLOPE else ("x",)


@dataclass(frozen=True)
class DgpSpec:
    """
    One cell of a simulation grid.

    Attributes:
        kind: Data-generating process
        n_groups: G
        group_size: Observations per group (time points T for dgp2)
        beta: True fixed coefficients, intercept first; ones by default
        seed: Root seed
        normal_param: Whether N(a, b) takes b as a variance or a standard deviation
    """

    kind: DgpKind
    n_groups: int
    group_size: int
    beta: Optional[Tuple[float, ...]] = None
    seed: Optional[int] = None
    normal_param: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", DgpKind(self.kind))
        if self.n_groups < 2:
            raise ConfigError(f"A simulation needs at least two groups, got G={self.n_groups}")
        if self.group_size < 1:
            raise ConfigError(f"Group size must be positive, got {self.group_size}")
        n_coef = 1 + len(covariate_names(self.kind))
        beta = tuple(float(b) for b in (self.beta or (1.0,) * n_coef))
        if len(beta) != n_coef:
            raise ConfigError(f"{self.kind.value} takes {n_coef} coefficients, got {len(beta)}")
        object.__setattr__(self, "beta", beta)
        sim = get_config().simulation
        object.__setattr__(self, "seed", sim.seed if self.seed is None else int(self.seed))
        normal_param = self.normal_param or sim.normal_param
        if normal_param not in NORMAL_PARAMS:
            raise ConfigError(f"normal_param must be one of {NORMAL_PARAMS}, got {normal_param!r}")
        object.__setattr__(self, "normal_param", normal_param)

    @property
    def family(self) -> FamilySpec:
        return FamilySpec.from_name(FAMILIES[self.kind])

    @property
    def column_names(self) -> Tuple[str, ...]:
        return (INTERCEPT_NAME, *covariate_names(self.kind))

    @property
    def target(self) -> str:
        """Coefficient whose bias and coverage the experiments track."""
        return covariate_names(self.kind)[0]

    @property
    def z_columns(self) -> Tuple[str, ...]:
        return ("x2",) if self.kind == DgpKind.RANDOM_SLOPE else ()

    def truth(self) -> Dict[str, float]:
        return dict(zip(self.column_names, self.beta))

    def generator(self, replicate: int, role: StreamRole) -> np.random.Generator:
        key = (STREAM_IDS[self.kind], self.n_groups, self.group_size, int(replicate), int(role))
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=key)))


@dataclass(frozen=True)
class SimulatedData:
    """A generated dataset with the parameters and latent effects behind it."""

    dataset: GroupedDataset
    spec: DgpSpec
    replicate: int
    latent: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def truth(self) -> Dict[str, float]:
        return self.spec.truth()

    @property
    def family(self) -> FamilySpec:
        return self.spec.family

    def group_intercepts(self) -> np.ndarray:
        """True group intercept shifts, one per group."""
        return sum(self.latent[name] for name in INTERCEPT_LATENT[self.spec.kind])


def normal(rng: np.random.Generator, mean, spread: float, size, normal_param: str) -> np.ndarray:
    """Draw N(mean, spread) reading spread as a variance or as a standard deviation."""
    scale = np.sqrt(spread) if normal_param == "variance" else spread
    return rng.normal(mean, scale, size)


def ar1_errors(rng: np.random.Generator, n_series: int, length: int, variance: float,
               rho: float = AR1_RHO) -> np.ndarray:
    """
    Stationary Gaussian AR(1) series with marginal variance ``variance``.

    Returns:
        n_series x length array with cor(e_t, e_{t+k}) = rho^k
    """
    out = np.empty((n_series, length))
    out[:, 0] = rng.normal(0.0, np.sqrt(variance), n_series)
    innovation_sd = np.sqrt(variance * (1.0 - rho ** 2))
    for t in range(1, length):
        out[:, t] = rho * out[:, t - 1] + rng.normal(0.0, innovation_sd, n_series)
    return out


def _latent(spec: DgpSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    g, p = spec.n_groups, spec.normal_param
    if spec.kind == DgpKind.LOGISTIC_RI:
        return {"gamma": normal(rng, 0.0, 1.0, g, p)}
    if spec.kind == DgpKind.DGP1:
        w = rng.standard_normal((g, 2))
        return {"w1": w[:, 0], "w2": w[:, 1]}
    if spec.kind == DgpKind.DGP2:
        return {"w": normal(rng, 0.0, 1.0, g, p)}
    if spec.kind == DgpKind.POISSON_LOG:
        return {"w": normal(rng, 0.0, 1.5, g, p)}
    if spec.kind == DgpKind.POISSON_BIAS:
        w = rng.normal(0.0, 0.5, (g, 2))
        return {"w1": w[:, 0], "w2": w[:, 1]}
    return {"w1": normal(rng, 0.0, 1.0, g, p), "w2": rng.chisquare(1, g) - 1.0}


def _observations(spec: DgpSpec, latent: Dict[str, np.ndarray], rng: np.random.Generator
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Covariates (without intercept) and the linear predictor, group-major."""
    n, p = spec.n_groups * spec.group_size, spec.normal_param
    per_row = {name: np.repeat(values, spec.group_size) for name, values in latent.items()}
    b = spec.beta

    if spec.kind == DgpKind.LOGISTIC_RI:
        x = normal(rng, 0.0, 0.5, n, p)
        return x[:, None], b[0] + b[1] * x + per_row["gamma"]
    if spec.kind in (DgpKind.DGP1, DgpKind.POISSON_BIAS):
        x = normal(rng, per_row["w1"], 0.5, n, p)
        return x[:, None], b[0] + b[1] * x + per_row["w1"] + per_row["w2"]
    if spec.kind == DgpKind.DGP2:
        x = normal(rng, 0.0, 0.5, n, p)
        variance = 0.5 if p == "variance" else 0.25
        eps = ar1_errors(rng, spec.n_groups, spec.group_size, variance).ravel()
        return x[:, None], b[0] + b[1] * x + per_row["w"] + eps
    if spec.kind == DgpKind.POISSON_LOG:
        x = normal(rng, 0.0, 1.0, n, p)
        return x[:, None], b[0] + b[1] * x + per_row["w"]
    x2 = normal(rng, 0.0, 0.5, n, p)
    x1 = x2 * per_row["w2"] + normal(rng, 0.0, 0.5, n, p)
    eta = b[0] + b[1] * x1 + x2 * (b[2] + per_row["w2"]) + per_row["w1"]
    return np.column_stack([x1, x2]), eta


_OUTCOMES: Dict[str, Callable[[np.random.Generator, np.ndarray], np.ndarray]] = {
    "bernoulli": lambda rng, eta: rng.binomial(1, expit(eta)).astype(float),
    "poisson": lambda rng, eta: rng.poisson(np.exp(eta)).astype(float),
}


def _draw(spec: DgpSpec, replicate: int, latent: Dict[str, np.ndarray], role: StreamRole) -> SimulatedData:
    rng = spec.generator(replicate, role)
    covariates, eta = _observations(spec, latent, rng)
    y = _OUTCOMES[FAMILIES[spec.kind]](rng, eta)
    x = np.column_stack([np.ones(y.shape[0]), covariates])
    groups = np.repeat(np.arange(spec.n_groups), spec.group_size)
    z_spec = [spec.column_names.index(name) for name in spec.z_columns]
    dataset = build_dataset(y, x, groups, z_spec, column_names=spec.column_names)
    return SimulatedData(dataset=dataset, spec=spec, replicate=replicate, latent=latent)


def generate(spec: DgpSpec, replicate: int) -> SimulatedData:
    """
    Draw one training dataset.

    Args:
        spec: Grid cell
        replicate: Replicate index

    Returns:
        SimulatedData with the dataset, true coefficients and latent group effects
    """
    latent = _latent(spec, spec.generator(replicate, StreamRole.LATENT))
    return _draw(spec, replicate, latent, StreamRole.TRAIN)


def generate_test(train: SimulatedData) -> SimulatedData:
    """Test set of the same size reusing the training groups' latent effects."""
    return _draw(train.spec, train.replicate, train.latent, StreamRole.TEST)
