"""
Configuration management utilities.

Settings for the IRLS engine, quadrature, inference defaults, simulation
seeding and logging. Values come from dataclass defaults, an optional YAML or
JSON settings file and the single environment override GROUPED_GLM_SEED.
Loading never touches the filesystem beyond reading the settings file.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "GROUPED_GLM_SEED"

CRSE_CORRECTIONS = ("none", "g-over-g-1", "stata")
NORMAL_PARAMS = ("variance", "sd")


@dataclass
class EstimationConfig:
    """Penalized IRLS settings."""
    max_iter: int = 200
    tol: float = 1e-9
    max_halvings: int = 20
    separation_threshold: float = 15.0

    def __post_init__(self):
        if self.max_iter < 1 or self.tol <= 0:
            raise ConfigError("estimation.max_iter must be positive and estimation.tol > 0")


@dataclass
class QuadratureConfig:
    """Integrated-likelihood and outer optimizer settings."""
    n_nodes: int = 25
    adaptive: bool = True
    max_outer_iter: int = 500
    boundary: float = 1e-10
    grad_step: float = 1e-6
    hessian_step: float = 1e-4

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ConfigError(f"quadrature.n_nodes must be at least 1, got {self.n_nodes}")


@dataclass
class InferenceConfig:
    """Variance estimation defaults."""
    level: float = 0.95
    n_bootstrap: int = 200
    crse_correction: str = "g-over-g-1"
    max_failure_share: float = 0.2

    def __post_init__(self):
        if self.crse_correction not in CRSE_CORRECTIONS:
            raise ConfigError(f"inference.crse_correction must be one of {CRSE_CORRECTIONS}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("inference.level must lie in (0, 1)")
        if self.n_bootstrap < 50:
            raise ConfigError(f"inference.n_bootstrap must be at least 50, got {self.n_bootstrap}")


@dataclass
class SimulationConfig:
    """Monte Carlo defaults."""
    seed: int = 20240601
    normal_param: str = "variance"
    n_jobs: int = -1

    def __post_init__(self):
        if self.normal_param not in NORMAL_PARAMS:
            raise ConfigError(f"simulation.normal_param must be one of {NORMAL_PARAMS}")


@dataclass
class LoggingConfig:
    """Logging settings."""
    level: str = "INFO"
    format: str = "standard"
    log_file: Optional[str] = None


SECTIONS = {
    "estimation": EstimationConfig,
    "quadrature": QuadratureConfig,
    "inference": InferenceConfig,
    "simulation": SimulationConfig,
    "logging": LoggingConfig,
}


def _section(name: str, values: Any):
    cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"Settings section '{name}' must be a mapping")
    unknown = set(values) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"Unknown keys in settings section '{name}': {sorted(unknown)}")
    return cls(**values)


class Config:
    """Main configuration class."""

    estimation: EstimationConfig
    quadrature: QuadratureConfig
    inference: InferenceConfig
    simulation: SimulationConfig
    logging: LoggingConfig

    def __init__(self, config_file: Optional[str] = None):
        """
        Initialize configuration.

        Args:
            config_file: Optional path to a YAML or JSON settings file

        Raises:
            ConfigError: Missing or malformed settings file
        """
        self.config_file = config_file
        self._load_config()

    def _load_config(self):
        file_config = self._load_config_file(self.config_file) if self.config_file else {}
        unknown = set(file_config) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"Unknown settings sections: {sorted(unknown)}")

        simulation = dict(file_config.get("simulation") or {})
        env_seed = os.getenv(SEED_ENV_VAR)
        if env_seed:
            try:
                simulation["seed"] = int(env_seed)
            except ValueError:
                logger.warning(f"Ignoring non-integer {SEED_ENV_VAR}={env_seed!r}")
        file_config["simulation"] = simulation

        for name in SECTIONS:
            setattr(self, name, _section(name, file_config.get(name) or {}))

    def _load_config_file(self, config_file: str) -> Dict[str, Any]:
        """Parse a YAML (.yaml/.yml) or JSON settings file into a dict."""
        config_path = Path(config_file)
        suffix = config_path.suffix.lower()
        if suffix not in (".yaml", ".yml", ".json"):
            raise ConfigError(f"Unsupported settings file format: {config_path.suffix}")
        try:
            with open(config_path, "r") as f:
                data = yaml.safe_load(f) if suffix in (".yaml", ".yml") else json.load(f)
        except (OSError, yaml.YAMLError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not load settings file {config_file}: {e}")
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise ConfigError(f"Settings file {config_file} must contain a mapping")
        logger.debug(f"Loaded settings from {config_file}")
        return data

    def to_dict(self) -> Dict[str, Any]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def save_config(self, output_file: str):
        """
        Save current configuration to file.

        Args:
            output_file: Path to output settings file (.yaml, .yml or .json)
        """
        output_path = Path(output_file)
        suffix = output_path.suffix.lower()
        if suffix not in (".yaml", ".yml", ".json"):
            raise ConfigError(f"Unsupported output format: {output_path.suffix}")
        with open(output_path, "w") as f:
            if suffix == ".json":
                json.dump(self.to_dict(), f, indent=2)
            else:
                yaml.safe_dump(self.to_dict(), f, default_flow_style=False, indent=2)
        logger.info(f"Configuration saved to {output_file}")


# Global configuration instance
config = Config()


def get_config() -> Config:
    return config


def reload_config(config_file: Optional[str] = None) -> Config:
    """
    Reload the global configuration.

    Args:
        config_file: Optional path to a settings file

    Returns:
        Reloaded configuration instance
    """
    global config
    config = Config(config_file)
    return config
