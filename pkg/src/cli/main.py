"""
Command-line front end.

    fit       fit one estimator to a grouped CSV and write a JSON report
    simulate  run a Monte Carlo grid (JSON config or embedded preset)
    report    merge MetricsTable CSVs and render bias/RMSE/coverage tables

Exit codes: 0 success, 2 data or configuration errors, 3 estimation failures.
"""

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, List, Optional, Sequence

import pandas as pd

from ..data_processing.grouped_data import GroupedDataset, load_csv
from ..inference.bootstrap import cluster_bootstrap
from ..inference.variance import INFERENCE_METHODS, VarianceEstimate, check_compatible, model_based, sandwich
from ..models.estimators import ESTIMATOR_LABELS, ESTIMATORS, EstimatorOptions, fit_estimator
from ..models.families import FamilyKind, FamilySpec
from ..models.irls import FitResult
from ..simulation.experiment import CELL_KEYS, SUM_COLUMNS, pool_metrics, run_experiment, run_group_effect_comparison
from ..simulation.presets import PRESETS, preset
from ..utils.config import CRSE_CORRECTIONS, NORMAL_PARAMS, get_config, reload_config
from ..utils.exceptions import ConfigError, ConvergenceError, GroupedGLMError
from ..utils.logger import setup_logging
from .schemas import (
    CoefficientEntry,
    FitDiagnostics,
    FitReport,
    GammaSummary,
    InferenceMetadata,
    OutputKind,
    load_experiment,
)

logger = logging.getLogger(__name__)

# column order of the bias tables
TABLE_ORDER = ["GLM", "RI", "Group-FE", "bcRI", "bcRegFE", "RegFE"]
REPORT_METRICS = {
    "bias": ("bias", "mc_se_bias"),
    "rmse": ("rmse", "mc_se_rmse"),
    "coverage": ("coverage", "mc_se_coverage"),
    "ci-width": ("mean_ci_width", None),
    "median": ("median_estimate", None),
    "test-error": ("mean_test_error", "mc_se_test_error"),
}


def _finite(value: Any) -> Optional[float]:
    value = float(value)
    return value if math.isfinite(value) else None


def _dumps(document: dict) -> str:
    return json.dumps(document, sort_keys=True, indent=2, allow_nan=False) + "\n"


# ----------------------------------------------------------------------
# fit


def compute_variance(fit: FitResult, ds: GroupedDataset, fam: FamilySpec, args: argparse.Namespace,
                     options: EstimatorOptions) -> VarianceEstimate:
    """Variance for the requested inference method."""
    level = args.level
    if args.inference == "crse":
        return replace(sandwich(fit, correction=args.crse_correction), level=level)
    if args.inference == "bootstrap":
        seed = args.seed if args.seed is not None else get_config().simulation.seed
        return cluster_bootstrap(ds, fam, fit.estimator, args.bootstrap, seed, level, options,
                                 n_jobs=args.threads, fit=fit)
    return replace(model_based(fit), level=level)


def build_fit_report(fit: FitResult, variance: VarianceEstimate, n_obs: int, n_groups: int,
                     singleton_groups: Sequence[Any] = ()) -> FitReport:
    """Assemble the JSON fit report."""
    se = variance.standard_errors()
    lower, upper = variance.confidence_intervals()
    n_beta = fit.beta_hat.shape[0]
    coefficients = [
        CoefficientEntry(
            name=name, kind="beta" if j < n_beta else "alpha", estimate=_finite(fit.fixed_coef[j]),
            se=_finite(se[j]), ci_lower=_finite(lower[j]), ci_upper=_finite(upper[j]),
        )
        for j, name in enumerate(fit.column_names)
    ]
    summary = fit.gamma_summary()
    for key in ("min", "median", "max"):
        summary[key] = None if summary[key] is None else _finite(summary[key])
    omega = fit.penalty.omega if fit.mlm_fit is None else fit.mlm_fit.omega
    gamma = GammaSummary(**summary, omega_sq=None if omega is None else _finite(omega[0, 0]))
    diagnostics = FitDiagnostics(
        converged=fit.converged, iterations=fit.iterations, objective=_finite(fit.objective),
        deviance=_finite(fit.deviance), theta=_finite(fit.theta_hat), dropped_columns=list(fit.dropped_columns),
        singleton_groups=list(singleton_groups), halving_failed=fit.diagnostics.get("halving_failed"),
    )
    return FitReport(
        estimator=fit.estimator, family=fit.family.name, n_obs=n_obs, n_groups=n_groups,
        coefficients=coefficients, gamma=gamma, diagnostics=diagnostics,
        inference=InferenceMetadata(**variance.metadata()),
    )


def cmd_fit(args: argparse.Namespace) -> int:
    check_compatible(args.estimator, args.inference)
    fam = FamilySpec.from_name(args.family)
    ds = load_csv(args.input, args.covariates, args.random_slopes or ())
    options = EstimatorOptions.with_nodes(args.n_nodes)

    fit = fit_estimator(args.estimator, ds, fam, options)
    if not fit.converged:
        raise ConvergenceError(f"{args.estimator} did not converge after {fit.iterations} iterations")
    variance = compute_variance(fit, ds, fam, args, options)
    report = build_fit_report(fit, variance, ds.n_obs, ds.n_groups, ds.diagnostics.get("singleton_groups", ()))

    text = _dumps(report.model_dump(mode="json"))
    if args.output and args.output != "-":
        Path(args.output).write_text(text)
        logger.info(f"Fit report written to {args.output}")
    else:
        sys.stdout.write(text)
    return 0


# ----------------------------------------------------------------------
# simulate


def _experiment_document(args: argparse.Namespace) -> dict:
    if bool(args.preset) == bool(args.config):
        raise ConfigError("Give exactly one of --preset or --config")
    if args.preset:
        document = preset(args.preset, fast=args.fast)
    else:
        try:
            document = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not read experiment config {args.config}: {e}")
        if not isinstance(document, dict):
            raise ConfigError("An experiment config must be a JSON object")
    if args.seed is not None:
        document["seed"] = args.seed
    if args.replicates is not None:
        document["M"] = args.replicates
    if args.normal_param is not None:
        document["normal_param"] = args.normal_param
    return document


def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_experiment(_experiment_document(args))
    name = config.name or "experiment"
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.output == OutputKind.GROUP_EFFECTS:
        path = out_dir / f"{name}_group_effects.csv"
        run_group_effect_comparison(config).to_csv(path, index=False)
        print(f"{name}: group effects written to {path}")
        return 0

    result = run_experiment(config, n_jobs=args.threads)
    metrics_path = out_dir / f"{name}_metrics.csv"
    replicates_path = out_dir / f"{name}_replicates.csv"
    result.metrics.to_csv(metrics_path, index=False)
    result.replicates.to_csv(replicates_path, index=False)

    n_fits = len(result.replicates)
    n_failed = int(result.replicates["failed"].sum())
    print(f"{name}: {len(result.metrics)} cells, {n_fits} fits, {n_failed} failed")
    for _, row in result.metrics[result.metrics["flagged"]].iterrows():
        print(f"  flagged: {row['estimator']}/{row['inference']} G={row['n_groups']} n={row['group_size']} "
              f"({row['n_failed']}/{row['n_replicates']} failed)")
    print(f"metrics: {metrics_path}\nreplicates: {replicates_path}")
    return 0


# ----------------------------------------------------------------------
# report


def _read_metrics(paths: Sequence[str]) -> List[pd.DataFrame]:
    if not paths:
        raise ConfigError("report needs at least one MetricsTable CSV")
    required = set(CELL_KEYS + SUM_COLUMNS + ["truth", "median_estimate"])
    tables = []
    for path in paths:
        try:
            table = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise ConfigError(f"Could not read {path}: {e}")
        missing = sorted(required - set(table.columns))
        if missing:
            raise ConfigError(f"{path} is not a MetricsTable: missing columns {missing}")
        tables.append(table)
    return tables


def metric_table(metrics: pd.DataFrame, metric: str) -> pd.DataFrame:
    """Wide table: one row per (dgp, G, n), one column per estimator in table order."""
    value_col, _ = REPORT_METRICS[metric]
    frame = metrics.copy()
    frame["column"] = frame["estimator"].map(ESTIMATOR_LABELS)
    multi = frame.groupby("estimator")["inference"].nunique() > 1
    tagged = frame["estimator"].map(multi) | (frame["inference"] != "default")
    frame.loc[tagged, "column"] = frame.loc[tagged, "column"] + " (" + frame.loc[tagged, "inference"] + ")"
    wide = frame.pivot_table(index=["dgp", "n_groups", "group_size"], columns="column", values=value_col,
                             aggfunc="first", sort=True)
    rank = {label: i for i, label in enumerate(TABLE_ORDER)}
    ordered = sorted(wide.columns, key=lambda c: (rank.get(c.split(" (")[0], len(rank)), c))
    wide = wide[ordered]
    wide.columns.name = None
    return wide.reset_index().rename(columns={"n_groups": "G", "group_size": "n"})


def render_markdown(table: pd.DataFrame, digits: int = 3) -> str:
    header = [str(c) for c in table.columns]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for row in table.itertuples(index=False):
        cells = [f"{v:.{digits}f}" if isinstance(v, float) else str(v) for v in row]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def long_format(metrics: pd.DataFrame) -> pd.DataFrame:
    """Plot-ready rows: one per (cell, method, metric) with its Monte Carlo SE."""
    frames = []
    for metric, (value_col, se_col) in REPORT_METRICS.items():
        part = metrics[CELL_KEYS + ["label"]].copy()
        part["metric"] = metric
        part["value"] = metrics[value_col]
        part["mc_se"] = metrics[se_col] if se_col else float("nan")
        frames.append(part)
    return pd.concat(frames, ignore_index=True)


def cmd_report(args: argparse.Namespace) -> int:
    pooled = pool_metrics(_read_metrics(args.paths))
    table = metric_table(pooled, args.metric)
    if args.format == "markdown":
        text = render_markdown(table)
    else:
        text = table.to_string(index=False, float_format=lambda v: f"{v:.3f}") + "\n"
    sys.stdout.write(text)
    if args.output:
        pooled.to_csv(args.output, index=False)
    if args.long_csv:
        long_format(pooled).to_csv(args.long_csv, index=False)
    return 0


# ----------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grouped_glm",
        description="Fixed effects, regularized fixed effects and multilevel GLMs for grouped data.",
    )
    parser.add_argument("--settings", help="YAML or JSON library settings file")
    parser.add_argument("--log-level", default=None, help="Logging level (default from settings)")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="Fit one estimator to a grouped CSV")
    fit.add_argument("--input", required=True, help="CSV with y, group and covariate columns")
    fit.add_argument("--output", default="-", help="JSON report path ('-' for stdout)")
    fit.add_argument("--estimator", required=True, choices=ESTIMATORS)
    fit.add_argument("--family", required=True, choices=[k.value for k in FamilyKind])
    fit.add_argument("--covariates", nargs="*", default=None, help="Covariate columns (default: all)")
    fit.add_argument("--random-slopes", nargs="*", default=None, help="Covariates with group-varying slopes")
    fit.add_argument("--inference", default="default", choices=INFERENCE_METHODS)
    fit.add_argument("--bootstrap", "-B", type=int, default=None, help="Bootstrap replicates")
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--level", type=float, default=None, help="Confidence level")
    fit.add_argument("--crse-correction", default=None, choices=CRSE_CORRECTIONS)
    fit.add_argument("--n-nodes", type=int, default=None, help="Gauss-Hermite nodes (1 = Laplace)")
    fit.add_argument("--threads", type=int, default=None, help="Bootstrap workers (default: all cores)")
    fit.set_defaults(handler=cmd_fit)

    simulate = sub.add_parser("simulate", help="Run a Monte Carlo experiment grid")
    simulate.add_argument("--config", help="Experiment JSON")
    simulate.add_argument("--preset", choices=sorted(PRESETS), help="Embedded experiment")
    simulate.add_argument("--fast", action="store_true", help="Reduced replicate counts")
    simulate.add_argument("--output-dir", default="results")
    simulate.add_argument("--seed", type=int, default=None)
    simulate.add_argument("--replicates", "-M", type=int, default=None)
    simulate.add_argument("--normal-param", choices=NORMAL_PARAMS, default=None)
    simulate.add_argument("--threads", type=int, default=None, help="Parallel workers (default: all cores)")
    simulate.set_defaults(handler=cmd_simulate)

    report = sub.add_parser("report", help="Merge MetricsTable CSVs and render tables")
    report.add_argument("paths", nargs="*", help="MetricsTable CSVs")
    report.add_argument("--metric", default="bias", choices=sorted(REPORT_METRICS))
    report.add_argument("--format", default="text", choices=["text", "markdown"])
    report.add_argument("--output", help="Write the pooled MetricsTable here")
    report.add_argument("--long-csv", help="Write plot-ready long-format metrics here")
    report.set_defaults(handler=cmd_report)
    return parser


def _configure_logging(args: argparse.Namespace):
    settings = get_config().logging
    log_file, log_dir = None, None
    if args.command == "fit" and args.output and args.output != "-":
        log_file = str(Path(args.output).with_suffix(".log"))
    elif args.command == "simulate":
        log_file, log_dir = "simulate.log", args.output_dir
    setup_logging(log_level=args.log_level or settings.level, log_format=settings.format,
                  log_file=log_file or settings.log_file, log_dir=log_dir)


def _apply_defaults(args: argparse.Namespace):
    cfg = get_config()
    if args.command != "fit":
        return
    args.bootstrap = cfg.inference.n_bootstrap if args.bootstrap is None else args.bootstrap
    args.level = cfg.inference.level if args.level is None else args.level
    args.crse_correction = args.crse_correction or cfg.inference.crse_correction
    args.n_nodes = cfg.quadrature.n_nodes if args.n_nodes is None else args.n_nodes


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.settings:
            reload_config(args.settings)
        _configure_logging(args)
        _apply_defaults(args)
        return args.handler(args)
    except GroupedGLMError as e:
        print(f"error: {e}", file=sys.stderr)
        logger.debug("Command failed", exc_info=True)
        return e.exit_code
