"""
Exception hierarchy for the grouped GLM library.

Every error raised on purpose by the library derives from GroupedGLMError so
callers (the CLI in particular) can map failures onto exit codes.
"""

from typing import Iterable, Optional, Sequence


class GroupedGLMError(Exception):
    """Base class for all library errors."""

    exit_code: int = 2


class DataValidationError(GroupedGLMError, ValueError):
    """Input data failed validation.

    Attributes:
        report: Optional ValidationReport with the individual findings
    """

    exit_code = 2

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class RankDeficiencyError(DataValidationError):
    """Design matrix does not have full column rank."""

    def __init__(self, message: str, columns: Optional[Sequence[str]] = None, report=None):
        super().__init__(message, report=report)
        self.columns = list(columns or [])


class DomainError(GroupedGLMError, ValueError):
    """Argument outside the domain of a link, variance or likelihood function."""

    exit_code = 2


class IncompatibleOptionsError(GroupedGLMError, ValueError):
    """Requested estimator and inference method cannot be combined."""

    exit_code = 2


class ConfigError(GroupedGLMError, ValueError):
    """Malformed configuration document or table schema mismatch."""

    exit_code = 2


class IdentifiabilityError(GroupedGLMError):
    """Penalized normal equations are singular."""

    exit_code = 3

    def __init__(self, message: str, columns: Optional[Iterable[str]] = None):
        super().__init__(message)
        self.columns = list(columns or [])


class ConvergenceError(GroupedGLMError):
    """Iterative estimation did not converge."""

    exit_code = 3


class QuadratureError(GroupedGLMError):
    """Random-effect integral could not be evaluated."""

    exit_code = 3


class IndefiniteHessianError(GroupedGLMError):
    """Observed information is not positive definite."""

    exit_code = 3


class BootstrapFailureError(GroupedGLMError):
    """Too many bootstrap refits failed."""

    exit_code = 3

    def __init__(self, message: str, n_failed: int = 0, n_replicates: int = 0):
        super().__init__(message)
        self.n_failed = n_failed
        self.n_replicates = n_replicates
