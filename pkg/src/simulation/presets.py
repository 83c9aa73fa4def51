"""
Embedded experiment configurations.

Each preset fixes the process, grid and methods of one standard experiment. ``fast=True``
keeps the grid and cuts the replicate and bootstrap counts for smoke runs.
"""

import copy
from typing import Any, Dict

from ..utils.exceptions import ConfigError

BIAS_TABLE_GRID = [{"G": g, "n": n} for g in (15, 50) for n in (5, 15, 25, 50)]
BIAS_TABLE_ESTIMATORS = ["glm", "ri-mlm", "fe", "bc-ri", "bc-regfe"]
FAST_REPLICATES = 25
FAST_BOOTSTRAP = 50

PRESETS: Dict[str, Dict[str, Any]] = {
    "smoke": {
        "dgp": "dgp1",
        "grid": [{"G": 15, "n": 5}],
        "estimators": ["glm", "fe"],
        "inference": ["default", "crse"],
        "M": 2,
    },
    "table3": {
        "dgp": "dgp1",
        "grid": BIAS_TABLE_GRID,
        "estimators": BIAS_TABLE_ESTIMATORS,
        "M": 1000,
    },
    "table4": {
        "dgp": "dgp1",
        "grid": BIAS_TABLE_GRID,
        "estimators": BIAS_TABLE_ESTIMATORS,
        "M": 1000,
    },
    "figure1": {
        "dgp": "logistic-ri",
        "grid": [{"G": 50, "n": n} for n in (5, 10, 15, 25, 50)],
        "estimators": ["glm", "ri-mlm", "regfe", "fe"],
        "M": 1000,
    },
    "figure2": {
        "dgp": "logistic-ri",
        "grid": [{"G": 50, "n": 5}, {"G": 50, "n": 50}],
        "output": "group-effects",
        "M": 1,
    },
    "figure3": {
        "dgp": "dgp1",
        "grid": [{"G": 50, "n": n} for n in (5, 15, 25, 50)],
        "estimators": ["glm", "ri-mlm", "regfe", "fe"],
        "M": 1000,
    },
    "figure4": {
        "dgp": "dgp1",
        "grid": BIAS_TABLE_GRID,
        "estimators": ["fe", "bc-ri", "bc-regfe"],
        "test_error": True,
        "M": 1000,
    },
    "figure5": {
        "dgp": "dgp1",
        "grid": [{"G": 50, "n": 5}, {"G": 50, "n": 50}],
        "estimators": ["ri-mlm", "fe", "bc-ri", "bc-regfe"],
        "M": 1000,
    },
    "figure6": {
        "dgp": "dgp2",
        "grid": [{"G": g, "n": 25} for g in (15, 50, 75)],
        "methods": [
            {"estimator": "ri-mlm", "inference": "default"},
            {"estimator": "ri-mlm", "inference": "bootstrap"},
            {"estimator": "fe", "inference": "crse"},
            {"estimator": "regfe", "inference": "crse"},
        ],
        "M": 1000,
        "B": 200,
    },
    "appendix-a3": {
        "dgp": "poisson-log",
        "grid": [{"G": g, "n": n} for g in (15, 50) for n in (5, 15, 25, 50)],
        "estimators": ["glm", "ri-mlm", "regfe", "fe"],
        "M": 1000,
    },
    "appendix-a4": {
        "dgp": "poisson-bias",
        "grid": [{"G": g, "n": n} for g in (15, 50) for n in (5, 50)],
        "estimators": ["glm", "ri-mlm", "bc-ri", "regfe", "bc-regfe", "fe"],
        "test_error": True,
        "M": 1000,
    },
    "appendix-a5": {
        "dgp": "random-slope",
        "grid": [{"G": g, "n": n} for g in (15, 50) for n in (5, 25)],
        "estimators": ["ri-mlm", "bc-ri", "bc-regfe", "fe"],
        "test_error": True,
        "M": 1000,
    },
}


def preset(name: str, fast: bool = False) -> Dict[str, Any]:
    """
    Experiment document for a named preset.

    Args:
        name: Preset name
        fast: Reduce M (and B) for a quick run

    Returns:
        Dict accepted by ExperimentConfig

    Raises:
        ConfigError: Unknown preset
    """
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset '{name}'; expected one of {sorted(PRESETS)}")
    document = copy.deepcopy(PRESETS[name])
    document["name"] = f"{name}-fast" if fast else name
    if fast:
        document["M"] = min(document.get("M", FAST_REPLICATES), FAST_REPLICATES)
        if "B" in document:
            document["B"] = FAST_BOOTSTRAP
    return document
