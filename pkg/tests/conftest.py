"""
Shared fixtures and the --runslow switch for the Monte Carlo acceptance runs.
"""

import numpy as np
import pytest
from scipy.special import expit

from src.data_processing.grouped_data import INTERCEPT_NAME, GroupedDataset, build_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the long Monte Carlo acceptance checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo run, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def simulate_grouped(family: str, n_groups: int = 12, group_size: int = 8, seed: int = 0,
                     beta=(0.3, 1.0), group_sd: float = 0.8, correlated: bool = False,
                     noise_sd: float = 1.0) -> GroupedDataset:
    """Small random-intercept dataset with one covariate ``x``."""
    rng = np.random.default_rng(seed)
    groups = np.repeat(np.arange(n_groups), group_size)
    gamma = rng.normal(0.0, group_sd, n_groups)
    x = rng.normal(0.0, 1.0, groups.shape[0])
    if correlated:
        x = x + gamma[groups]
    eta = beta[0] + beta[1] * x + gamma[groups]
    if family == "gaussian":
        y = eta + rng.normal(0.0, noise_sd, eta.shape[0])
    elif family == "bernoulli":
        y = rng.binomial(1, expit(eta)).astype(float)
    else:
        y = rng.poisson(np.exp(eta)).astype(float)
    return build_dataset(y, np.column_stack([np.ones_like(x), x]), groups, column_names=[INTERCEPT_NAME, "x"])


@pytest.fixture
def gaussian_data():
    return simulate_grouped("gaussian", seed=1)


@pytest.fixture
def bernoulli_data():
    return simulate_grouped("bernoulli", n_groups=15, group_size=20, seed=2, beta=(0.0, 0.8), group_sd=0.6)


@pytest.fixture
def poisson_data():
    return simulate_grouped("poisson", seed=3, beta=(0.2, 0.5), group_sd=0.5)
