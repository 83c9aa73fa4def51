"""
Pydantic schemas for experiment configurations and fit reports.

The experiment document is the JSON accepted by ``simulate --config``; the
fit report is the JSON written by ``fit``.
"""

import json
from enum import Enum
from itertools import product
from pathlib import Path
from typing import Any, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..inference.variance import INFERENCE_METHODS
from ..models.estimators import ESTIMATORS, MLM_ESTIMATORS
from ..simulation.dgp import DgpKind
from ..utils.config import CRSE_CORRECTIONS
from ..utils.exceptions import ConfigError


class OutputKind(str, Enum):
    """What a simulation run produces."""
    METRICS = "metrics"
    GROUP_EFFECTS = "group-effects"


class GridPoint(BaseModel):
    """One (G, n) cell of a simulation grid."""
    model_config = ConfigDict(populate_by_name=True, frozen=True)

    n_groups: int = Field(..., alias="G", ge=2, description="Number of groups")
    group_size: int = Field(..., alias="n", ge=1, description="Observations per group")


class MethodSpec(BaseModel):
    """Estimator paired with an inference method."""
    model_config = ConfigDict(frozen=True)

    estimator: str = Field(..., description="Estimator name")
    inference: str = Field(default="default", description="Inference method")

    @field_validator("estimator")
    @classmethod
    def validate_estimator(cls, v):
        if v not in ESTIMATORS:
            raise ValueError(f"Unknown estimator '{v}'; expected one of {list(ESTIMATORS)}")
        return v

    @field_validator("inference")
    @classmethod
    def validate_inference(cls, v):
        if v not in INFERENCE_METHODS:
            raise ValueError(f"Unknown inference '{v}'; expected one of {list(INFERENCE_METHODS)}")
        return v

    @model_validator(mode="after")
    def validate_pair(self):
        if self.inference == "crse" and self.estimator in MLM_ESTIMATORS:
            raise ValueError(f"{self.estimator} with crse is not supported: there is no comprehensive "
                             f"extension of cluster-robust errors to MLM fits")
        return self

    @property
    def key(self) -> str:
        return f"{self.estimator}/{self.inference}"


class ExperimentConfig(BaseModel):
    """Monte Carlo experiment document."""
    model_config = ConfigDict(populate_by_name=True)

    name: Optional[str] = Field(None, description="Run name recorded in the outputs")
    dgp: DgpKind = Field(..., description="Data-generating process")
    grid: List[GridPoint] = Field(..., min_length=1, description="(G, n) cells")
    estimators: List[str] = Field(default_factory=list, description="Estimators crossed with inference")
    inference: List[str] = Field(default_factory=lambda: ["default"], description="Inference methods")
    methods: Optional[List[MethodSpec]] = Field(None, description="Explicit estimator/inference pairs")
    n_replicates: int = Field(1000, alias="M", ge=1, description="Replicates per cell")
    n_bootstrap: int = Field(200, alias="B", ge=50, description="Bootstrap replicates")
    seed: Optional[int] = Field(None, ge=0, description="Master seed")
    normal_param: Literal["variance", "sd"] = Field("variance", description="Reading of N(a, b)")
    level: float = Field(0.95, gt=0.0, lt=1.0, description="Confidence level")
    crse_correction: str = Field("g-over-g-1", description="CRSE small-sample correction")
    n_nodes: int = Field(25, ge=1, description="Gauss-Hermite nodes")
    test_error: bool = Field(False, description="Also score predictions on a test set")
    output: OutputKind = Field(OutputKind.METRICS, description="Metrics grid or group-effect comparison")

    @field_validator("estimators")
    @classmethod
    def validate_estimators(cls, v):
        unknown = [name for name in v if name not in ESTIMATORS]
        if unknown:
            raise ValueError(f"Unknown estimators {unknown}; expected a subset of {list(ESTIMATORS)}")
        return v

    @field_validator("inference")
    @classmethod
    def validate_inference(cls, v):
        unknown = [name for name in v if name not in INFERENCE_METHODS]
        if unknown:
            raise ValueError(f"Unknown inference methods {unknown}; expected a subset of {list(INFERENCE_METHODS)}")
        return v

    @field_validator("crse_correction")
    @classmethod
    def validate_correction(cls, v):
        if v not in CRSE_CORRECTIONS:
            raise ValueError(f"crse_correction must be one of {list(CRSE_CORRECTIONS)}")
        return v

    @model_validator(mode="after")
    def validate_methods(self):
        if self.output == OutputKind.METRICS and not self.estimators and not self.methods:
            raise ValueError("An experiment needs 'estimators' or 'methods'")
        return self

    def method_list(self) -> List[MethodSpec]:
        """Explicit methods, or estimators x inference without unsupported pairs."""
        if self.methods:
            return list(self.methods)
        pairs = []
        for estimator, inference in product(self.estimators, self.inference):
            if inference == "crse" and estimator in MLM_ESTIMATORS:
                continue
            pairs.append(MethodSpec(estimator=estimator, inference=inference))
        return pairs


def load_experiment(source: Union[str, Path, dict]) -> ExperimentConfig:
    """
    Parse an experiment document from a path or a dict.

    Raises:
        ConfigError: Unreadable file or schema violation
    """
    if not isinstance(source, dict):
        path = Path(source)
        try:
            source = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not read experiment config {path}: {e}")
    try:
        return ExperimentConfig.model_validate(source)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config: {e}")


class CoefficientEntry(BaseModel):
    """One fixed coefficient in a fit report."""
    name: str
    kind: Literal["beta", "alpha"] = Field(..., description="Original column or bias-correction column")
    estimate: Optional[float]
    se: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None


class GammaSummary(BaseModel):
    """Summary of the estimated group coefficients."""
    n_effects: int = Field(..., ge=0)
    min: Optional[float] = None
    median: Optional[float] = None
    max: Optional[float] = None
    reference_group: Optional[Any] = None
    separated_groups: List[Any] = Field(default_factory=list)
    omega_sq: Optional[float] = None
    omega_sq_at_boundary: Optional[bool] = None


class FitDiagnostics(BaseModel):
    """Convergence and data notes for a fit."""
    converged: bool
    iterations: int = Field(..., ge=0)
    objective: Optional[float] = None
    deviance: Optional[float] = None
    theta: Optional[float] = None
    dropped_columns: List[str] = Field(default_factory=list)
    singleton_groups: List[Any] = Field(default_factory=list)
    halving_failed: Optional[bool] = None


class InferenceMetadata(BaseModel):
    """How the reported uncertainty was computed."""
    method: str
    level: float = Field(..., gt=0.0, lt=1.0)
    c: Optional[float] = None
    n_replicates: Optional[int] = None
    n_failed: Optional[int] = None
    seed: Optional[Any] = None


class FitReport(BaseModel):
    """JSON document written by the fit command."""
    estimator: str
    family: str
    n_obs: int = Field(..., ge=1)
    n_groups: int = Field(..., ge=1)
    coefficients: List[CoefficientEntry]
    gamma: GammaSummary
    diagnostics: FitDiagnostics
    inference: InferenceMetadata
