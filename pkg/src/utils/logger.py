"""
Logging configuration and utilities.

Library modules log through ``logging.getLogger(__name__)`` and never attach
handlers. ``setup_logging`` is called by the CLI: console records go to
stderr, the sidecar file gets one JSON object per record. Estimation events
(fits, bootstrap runs, simulation cells) go through ``GroupedGLMLogger`` so
their fields land in the JSON record as ``extra_fields``.
"""

import json
import logging
import logging.handlers
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional


class StructuredFormatter(logging.Formatter):
    """
    Formatter that renders each record as a single JSON object.
    """

    def format(self, record: logging.LogRecord) -> str:
        payload: Dict[str, Any] = {
            'timestamp': self.formatTime(record, '%Y-%m-%dT%H:%M:%S'),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'function': record.funcName,
            'line': record.lineno,
            'process_id': os.getpid(),
        }
        if record.exc_info:
            payload['exception'] = self.formatException(record.exc_info)
        payload.update(getattr(record, 'extra_fields', {}))
        return json.dumps(payload, default=str)


class ColoredFormatter(logging.Formatter):
    """Console formatter that colors the level name."""

    COLORS = {
        'DEBUG': '\033[36m',
        'INFO': '\033[32m',
        'WARNING': '\033[33m',
        'ERROR': '\033[31m',
        'CRITICAL': '\033[35m',
    }
    RESET = '\033[0m'

    def __init__(self):
        super().__init__('%(asctime)s - %(levelname)s - %(name)s - %(message)s')

    def format(self, record: logging.LogRecord) -> str:
        plain = record.levelname
        record.levelname = f"{self.COLORS.get(plain, '')}{plain}{self.RESET}"
        try:
            return super().format(record)
        finally:
            record.levelname = plain


class GroupedGLMLogger:
    """
    Logger wrapper for estimation events.

    Every method emits one record whose ``extra_fields`` carry an
    ``event_type`` and the event's numbers.
    """

    def __init__(self, name: str):
        self.logger = logging.getLogger(name)
        self.name = name

    def _event(self, level: int, event_type: str, message: str, **fields):
        self.logger.log(level, message, extra={'extra_fields': {'event_type': event_type, **fields}})

    def log_fit(self, estimator: str, converged: bool, iterations: int, **kwargs):
        """
        Log the outcome of one model fit.

        Args:
            estimator: Estimator tag
            converged: Whether the fit converged
            iterations: Iterations used
            **kwargs: Additional fit diagnostics
        """
        status = 'converged' if converged else 'did not converge'
        self._event(logging.DEBUG if converged else logging.WARNING, 'model_fit',
                    f"{estimator} fit {status} after {iterations} iterations",
                    estimator=estimator, converged=converged, iterations=iterations, fit_metadata=kwargs)

    def log_bootstrap(self, estimator: str, n_replicates: int, n_failed: int, **kwargs):
        self._event(logging.INFO, 'cluster_bootstrap',
                    f"Cluster bootstrap for {estimator}: {n_replicates - n_failed}/{n_replicates} refits succeeded",
                    estimator=estimator, n_replicates=n_replicates, n_failed=n_failed, bootstrap_metadata=kwargs)

    def log_experiment_cell(self, dgp: str, n_groups: int, group_size: int, n_replicates: int, n_failed: int):
        """Log a finished Monte Carlo cell."""
        self._event(logging.INFO, 'experiment_cell',
                    f"{dgp} G={n_groups} n={group_size}: {n_replicates} replicates, {n_failed} failed fits",
                    dgp=dgp, n_groups=n_groups, group_size=group_size, n_replicates=n_replicates,
                    n_failed=n_failed)

    def log_replicate_failure(self, method: str, replicate: int, reason: str):
        self._event(logging.DEBUG, 'replicate_failure', f"Replicate {replicate}: {method} failed ({reason})",
                    method=method, replicate=replicate, reason=reason)


def setup_logging(
    log_level: str = "INFO",
    log_format: str = "standard",
    log_file: Optional[str] = None,
    log_dir: Optional[str] = None,
    max_file_size: int = 10 * 1024 * 1024,  # 10MB
    backup_count: int = 5,
    enable_console: bool = True
) -> None:
    """
    Configure the root logger.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_format: Console format ("standard", "structured", "colored")
        log_file: Optional log file name; the file is always structured JSON
        log_dir: Directory for log_file
        max_file_size: Maximum log file size in bytes
        backup_count: Number of rotated files to keep
        enable_console: Whether to log to stderr
    """
    numeric_level = getattr(logging, log_level.upper(), logging.INFO)
    root = logging.getLogger()
    root.setLevel(numeric_level)
    for handler in root.handlers[:]:
        root.removeHandler(handler)
        handler.close()

    if enable_console:
        if log_format == 'structured':
            console_formatter = StructuredFormatter()
        elif log_format == 'colored' and sys.stderr.isatty():
            console_formatter = ColoredFormatter()
        else:
            console_formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(numeric_level)
        console_handler.setFormatter(console_formatter)
        root.addHandler(console_handler)

    if log_file:
        path = Path(log_dir) / log_file if log_dir else Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(path, maxBytes=max_file_size, backupCount=backup_count)
        file_handler.setLevel(numeric_level)
        file_handler.setFormatter(StructuredFormatter())
        root.addHandler(file_handler)

    logging.getLogger('joblib').setLevel(logging.WARNING)


def get_logger(name: str) -> GroupedGLMLogger:
    return GroupedGLMLogger(name)
