"""
Data validation utilities.

Checks grouped-data inputs before a design is built: the CSV contract
(outcome, group and covariate columns), finiteness, missing values, array
shapes and group coverage. Findings accumulate in a ValidationReport;
errors abort through ``raise_if_invalid``.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .exceptions import DataValidationError

logger = logging.getLogger(__name__)

OUTCOME_COLUMN = "y"
GROUP_COLUMN = "group"


class ValidationSeverity(Enum):
    """Severity levels for validation findings."""
    INFO = "info"
    WARNING = "warning"
    ERROR = "error"
    CRITICAL = "critical"


@dataclass(frozen=True)
class ValidationResult:
    """One validation finding."""
    message: str
    severity: ValidationSeverity = ValidationSeverity.INFO

    @property
    def is_valid(self) -> bool:
        return self.severity in (ValidationSeverity.INFO, ValidationSeverity.WARNING)

    def __str__(self) -> str:
        return f"[{self.severity.value.upper()}] {self.message}"


@dataclass
class ValidationReport:
    """Collection of validation results."""
    results: List[ValidationResult] = field(default_factory=list)

    def add(self, message: str, severity: ValidationSeverity = ValidationSeverity.INFO):
        self.results.append(ValidationResult(message, severity))

    def add_info(self, message: str):
        self.add(message, ValidationSeverity.INFO)

    def add_warning(self, message: str):
        self.add(message, ValidationSeverity.WARNING)

    def add_error(self, message: str):
        self.add(message, ValidationSeverity.ERROR)

    @property
    def is_valid(self) -> bool:
        return all(result.is_valid for result in self.results)

    @property
    def errors(self) -> List[ValidationResult]:
        return [result for result in self.results if not result.is_valid]

    @property
    def warnings(self) -> List[ValidationResult]:
        return [result for result in self.results if result.severity == ValidationSeverity.WARNING]

    def raise_if_invalid(self, context: str = "Input data"):
        """Raise DataValidationError listing every error when the report failed."""
        if not self.is_valid:
            details = "; ".join(result.message for result in self.errors)
            raise DataValidationError(f"{context} failed validation: {details}", report=self)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'is_valid': self.is_valid,
            'total_checks': len(self.results),
            'errors': [str(result) for result in self.errors],
            'warnings': [str(result) for result in self.warnings],
        }


class DataValidator:
    """Validator for grouped regression inputs."""

    def __init__(self):
        self.report = ValidationReport()

    def validate_grouped_frame(self, df: pd.DataFrame, covariates: Optional[Sequence[str]] = None) -> ValidationReport:
        """
        Validate a DataFrame against the grouped CSV contract.

        The frame must hold an outcome column ``y``, a ``group`` column and
        numeric covariates; no value may be missing or infinite.

        Args:
            df: DataFrame to validate
            covariates: Covariate columns to check (default: every other column)

        Returns:
            ValidationReport with results
        """
        self.report = ValidationReport()

        if df is None:
            self.report.add("DataFrame is None", ValidationSeverity.CRITICAL)
            return self.report

        if df.empty:
            self.report.add_error("DataFrame is empty")
            return self.report

        missing_columns = [col for col in (OUTCOME_COLUMN, GROUP_COLUMN) if col not in df.columns]
        if missing_columns:
            self.report.add_error(f"Missing required columns: {missing_columns}")
            return self.report

        if covariates is None:
            covariates = [col for col in df.columns if col not in (OUTCOME_COLUMN, GROUP_COLUMN)]
        unknown = [col for col in covariates if col not in df.columns]
        if unknown:
            self.report.add_error(f"Unknown covariate columns: {unknown}")
            return self.report

        self.report.add_info(f"DataFrame has {len(df)} rows and {len(covariates)} covariates")

        columns = [OUTCOME_COLUMN, GROUP_COLUMN, *covariates]
        missing_counts = df[columns].isnull().sum()
        for col in columns:
            if missing_counts[col] > 0:
                self.report.add_error(f"Column '{col}' has {missing_counts[col]} missing values")

        for col in [OUTCOME_COLUMN, *covariates]:
            if not pd.api.types.is_numeric_dtype(df[col]):
                self.report.add_error(f"Column '{col}' is not numeric")
                continue
            inf_count = int(np.isinf(df[col].to_numpy(dtype=float)).sum())
            if inf_count > 0:
                self.report.add_error(f"Column '{col}' contains {inf_count} infinite values")

        self._check_group_sizes(df[GROUP_COLUMN].to_numpy())
        return self.report

    def validate_arrays(self, y: np.ndarray, x: np.ndarray, group_ids: np.ndarray) -> ValidationReport:
        """
        Validate raw arrays handed to the dataset builder.

        Args:
            y: Outcome vector
            x: Fixed-effect design matrix
            group_ids: Group label per observation

        Returns:
            ValidationReport with results
        """
        self.report = ValidationReport()

        if y.ndim != 1:
            self.report.add_error(f"Outcome must be a vector, got shape {y.shape}")
        if x.ndim != 2:
            self.report.add_error(f"Design must be a matrix, got shape {x.shape}")
        if group_ids.ndim != 1:
            self.report.add_error(f"Group ids must be a vector, got shape {group_ids.shape}")
        if not self.report.is_valid:
            return self.report

        n_obs = y.shape[0]
        if n_obs == 0:
            self.report.add_error("Empty group id set: no observations supplied")
            return self.report
        if x.shape[0] != n_obs or group_ids.shape[0] != n_obs:
            self.report.add_error(
                f"Length mismatch: y has {n_obs} rows, x has {x.shape[0]}, groups has {group_ids.shape[0]}"
            )
            return self.report

        if not np.all(np.isfinite(y)):
            self.report.add_error(f"Outcome contains {int((~np.isfinite(y)).sum())} non-finite values")
        if not np.all(np.isfinite(x)):
            self.report.add_error(f"Design contains {int((~np.isfinite(x)).sum())} non-finite values")
        if group_ids.dtype.kind == 'f' and not np.all(np.isfinite(group_ids)):
            self.report.add_error("Group ids contain non-finite values")

        if self.report.is_valid:
            self._check_group_sizes(group_ids)
        return self.report

    def _check_group_sizes(self, group_ids: np.ndarray):
        """Warn about single-observation groups."""
        _, counts = np.unique(group_ids, return_counts=True)
        singletons = int((counts == 1).sum())
        if singletons > 0:
            self.report.add_warning(f"{singletons} groups contain a single observation")
        self.report.add_info(f"{len(counts)} groups, sizes {counts.min()}-{counts.max()}")
