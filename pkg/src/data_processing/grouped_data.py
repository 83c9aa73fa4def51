"""
Grouped design construction.

This module builds the immutable GroupedDataset (outcome, fixed design X,
random design Z and group index, stored sorted and contiguous by group) and
the bias-correction augmentations: replicated group means of the covariates
and within-group projections of the covariates onto Z.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg

from ..utils.exceptions import DataValidationError, RankDeficiencyError
from ..utils.validators import DataValidator, GROUP_COLUMN, OUTCOME_COLUMN

logger = logging.getLogger(__name__)

INTERCEPT_NAME = "(Intercept)"
PINV_RTOL = 1e-10
# diagnostics describing the columns of x, kept when groups are resampled
DESIGN_KEYS = ("n_alpha", "aug_kind")


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def check_full_rank(x: np.ndarray, column_names: Sequence[str], context: str = "design matrix"):
    """
    Reject a rank-deficient design using a column-pivoted QR decomposition.

    Args:
        x: Design matrix
        column_names: Names used in the error message
        context: Description of the matrix for the error message

    Raises:
        RankDeficiencyError: If x does not have full column rank
    """
    n_obs, n_cols = x.shape
    if n_cols == 0:
        return
    if n_obs < n_cols:
        raise RankDeficiencyError(
            f"{context} has {n_cols} columns but only {n_obs} rows", columns=list(column_names)
        )
    r, pivots = linalg.qr(x, mode="r", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(n_obs, n_cols) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < n_cols:
        offending = [column_names[j] for j in pivots[rank:]]
        raise RankDeficiencyError(
            f"{context} is rank deficient (rank {rank} < {n_cols}); collinear columns: {offending}",
            columns=offending,
        )


@dataclass(frozen=True)
class GroupedDataset:
    """
    Grouped regression data stored sorted by group.

    Attributes:
        y: Outcome vector of length N
        x: Fixed design N x p; column 0 is the intercept
        z_columns: Columns of x forming Z (column 0 always first)
        group_index: Group code 0..G-1 per stored row, non-decreasing
        group_labels: Original group id per code
        group_sizes: n_g per code
        permutation: Input row index of each stored row
        column_names: Names of the x columns
        diagnostics: Construction notes (single-observation groups)
    """

    y: np.ndarray
    x: np.ndarray
    z_columns: Tuple[int, ...]
    group_index: np.ndarray
    group_labels: np.ndarray
    group_sizes: np.ndarray
    permutation: np.ndarray
    column_names: Tuple[str, ...]
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_obs(self) -> int:
        return int(self.y.shape[0])

    @property
    def n_groups(self) -> int:
        return int(self.group_sizes.shape[0])

    @property
    def n_fixed(self) -> int:
        return int(self.x.shape[1])

    @property
    def n_random(self) -> int:
        """d, the width of Z."""
        return len(self.z_columns)

    @property
    def z(self) -> np.ndarray:
        return self.x[:, list(self.z_columns)]

    @property
    def is_random_intercept(self) -> bool:
        return self.z_columns == (0,)

    @property
    def group_starts(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.group_sizes)[:-1])).astype(int)

    def group_slice(self, g: int) -> slice:
        start = int(self.group_starts[g])
        return slice(start, start + int(self.group_sizes[g]))

    def group_sums(self, values: np.ndarray) -> np.ndarray:
        """Sum rows of ``values`` within each group."""
        return np.add.reduceat(np.asarray(values, dtype=float), self.group_starts, axis=0)

    def group_means(self, values: np.ndarray) -> np.ndarray:
        sums = self.group_sums(values)
        sizes = self.group_sizes.reshape((-1,) + (1,) * (sums.ndim - 1))
        return sums / sizes

    def to_input_order(self, values: np.ndarray) -> np.ndarray:
        """Map a per-row vector from stored order back to input order."""
        out = np.empty_like(np.asarray(values))
        out[self.permutation] = values
        return out

    def codes_for(self, labels: Sequence[Any]) -> np.ndarray:
        """Group codes for external labels; unknown labels raise."""
        lookup = {label: code for code, label in enumerate(self.group_labels.tolist())}
        try:
            return np.array([lookup[label] for label in np.asarray(labels).tolist()], dtype=int)
        except KeyError as e:
            raise DataValidationError(f"Group {e.args[0]!r} does not appear in the training data")

    def with_design(self, x: np.ndarray, column_names: Sequence[str], context: str = "design matrix",
                    **diagnostics) -> "GroupedDataset":
        """Same rows and groups with a replacement fixed design (rank checked)."""
        x = np.asarray(x, dtype=float)
        check_full_rank(x, column_names, context)
        return GroupedDataset(
            y=self.y, x=_frozen(x), z_columns=self.z_columns, group_index=self.group_index,
            group_labels=self.group_labels, group_sizes=self.group_sizes, permutation=self.permutation,
            column_names=tuple(column_names), diagnostics={**self.diagnostics, **diagnostics},
        )

    def resample_groups(self, codes: Sequence[int]) -> "GroupedDataset":
        """
        Dataset made of whole groups picked by code, in the given order.

        Duplicated codes become distinct groups with fresh ids 0..len(codes)-1.
        """
        codes = np.asarray(codes, dtype=int)
        starts = self.group_starts
        rows = np.concatenate([np.arange(starts[c], starts[c] + self.group_sizes[c]) for c in codes])
        sizes = self.group_sizes[codes]
        return GroupedDataset(
            y=_frozen(self.y[rows]), x=_frozen(self.x[rows]), z_columns=self.z_columns,
            group_index=_frozen(np.repeat(np.arange(len(codes)), sizes)),
            group_labels=_frozen(np.arange(len(codes))), group_sizes=_frozen(sizes.copy()),
            permutation=_frozen(np.arange(rows.shape[0])), column_names=self.column_names,
            diagnostics={**{key: self.diagnostics[key] for key in DESIGN_KEYS if key in self.diagnostics},
                         "resampled_from": codes.tolist()},
        )


def build_dataset(
    y: Sequence[float],
    x: np.ndarray,
    group_ids: Sequence[Any],
    z_spec: Sequence[int] = (),
    column_names: Optional[Sequence[str]] = None,
) -> GroupedDataset:
    """
    Validate inputs and build a GroupedDataset sorted by group.

    Args:
        y: Outcome vector
        x: Design matrix whose first column is the intercept
        group_ids: Group label per observation
        z_spec: Columns of x (besides the implicit intercept) entering Z
        column_names: Optional names for the columns of x

    Returns:
        GroupedDataset

    Raises:
        DataValidationError: Length mismatch, non-finite values, missing intercept
        RankDeficiencyError: x is not of full column rank
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    group_ids = np.asarray(group_ids)

    report = DataValidator().validate_arrays(y, x, group_ids)
    report.raise_if_invalid("Grouped data")

    n_obs, n_cols = x.shape
    if n_cols == 0 or not np.all(x[:, 0] == 1.0):
        raise DataValidationError("x must include an intercept column of ones in position 0")
    if column_names is None:
        column_names = [INTERCEPT_NAME] + [f"x{j}" for j in range(1, n_cols)]
    column_names = tuple(str(name) for name in column_names)
    if len(column_names) != n_cols:
        raise DataValidationError(f"{len(column_names)} column names for {n_cols} columns")

    z_extra = [int(j) for j in z_spec if int(j) != 0]
    if any(j < 0 or j >= n_cols for j in z_extra) or len(set(z_extra)) != len(z_extra):
        raise DataValidationError(f"Invalid z_spec {list(z_spec)} for {n_cols} columns")
    z_columns = (0, *z_extra)

    check_full_rank(x, column_names)

    labels, codes = np.unique(group_ids, return_inverse=True)
    order = np.argsort(codes, kind="stable")
    sizes = np.bincount(codes, minlength=len(labels))

    singleton_groups = labels[sizes == 1].tolist()
    diagnostics = {"singleton_groups": singleton_groups}
    if singleton_groups:
        logger.warning(f"{len(singleton_groups)} groups contain a single observation")

    return GroupedDataset(
        y=_frozen(y[order]), x=_frozen(x[order]), z_columns=z_columns,
        group_index=_frozen(codes[order]), group_labels=_frozen(labels), group_sizes=_frozen(sizes),
        permutation=_frozen(order), column_names=column_names, diagnostics=diagnostics,
    )


def dataset_from_frame(
    df: pd.DataFrame,
    covariates: Optional[Sequence[str]] = None,
    z_columns: Sequence[str] = (),
) -> GroupedDataset:
    """
    Build a dataset from a frame following the CSV contract.

    The frame holds ``y``, ``group`` and covariate columns; the intercept is
    added here.

    Args:
        df: Input frame
        covariates: Covariates to use (default: all remaining columns in order)
        z_columns: Covariates that receive random slopes

    Returns:
        GroupedDataset
    """
    validator = DataValidator()
    report = validator.validate_grouped_frame(df, covariates)
    report.raise_if_invalid("CSV input")

    if covariates is None:
        covariates = [col for col in df.columns if col not in (OUTCOME_COLUMN, GROUP_COLUMN)]
    covariates = list(covariates)
    unknown = [name for name in z_columns if name not in covariates]
    if unknown:
        raise DataValidationError(f"Random-slope columns {unknown} are not covariates")

    x = np.column_stack([np.ones(len(df))] + [df[col].to_numpy(dtype=float) for col in covariates])
    z_spec = [covariates.index(name) + 1 for name in z_columns]
    return build_dataset(
        df[OUTCOME_COLUMN].to_numpy(dtype=float), x, df[GROUP_COLUMN].to_numpy(), z_spec,
        column_names=[INTERCEPT_NAME, *covariates],
    )


def load_csv(path: Union[str, Path], covariates: Optional[Sequence[str]] = None,
             z_columns: Sequence[str] = ()) -> GroupedDataset:
    """Read a grouped CSV file (header row required) into a dataset."""
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"Input file not found: {path}")
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataValidationError(f"Could not parse {path}: {e}")
    logger.info(f"Loaded {len(df)} rows from {path}")
    return dataset_from_frame(df, covariates, z_columns)


def dataset_to_frame(ds: GroupedDataset) -> pd.DataFrame:
    """Inverse of dataset_from_frame, rows in input order."""
    order = np.argsort(ds.permutation)
    frame = pd.DataFrame({OUTCOME_COLUMN: ds.y[order], GROUP_COLUMN: ds.group_labels[ds.group_index][order]})
    for j, name in enumerate(ds.column_names[1:], start=1):
        frame[name] = ds.x[order, j]
    return frame


# ----------------------------------------------------------------------
# bias-correction augmentations


class AugmentationKind(str, Enum):
    GROUP_MEANS = "group_means"
    WITHIN_PROJECTION = "within_projection"


@dataclass(frozen=True)
class AugmentedDataset:
    """
    A dataset plus group-level regressors for bias correction.

    Attributes:
        base: Original dataset
        aug_cols: N x q added regressors
        aug_kind: Group means or within-group projection
        source_columns: Columns of base.x that were averaged/projected
        group_coefficients: G x d x q per-group projection coefficients, so the
            added regressors of any row in group g are z_row @ group_coefficients[g]
    """

    base: GroupedDataset
    aug_cols: np.ndarray
    aug_kind: AugmentationKind
    source_columns: Tuple[int, ...]
    group_coefficients: np.ndarray

    @property
    def aug_names(self) -> List[str]:
        prefix = "mean" if self.aug_kind == AugmentationKind.GROUP_MEANS else "proj"
        return [f"{prefix}_{self.base.column_names[j]}" for j in self.source_columns]

    @property
    def n_aug(self) -> int:
        return int(self.aug_cols.shape[1])

    def to_dataset(self) -> GroupedDataset:
        """Dataset whose design is [X, added regressors]."""
        x = np.hstack([self.base.x, self.aug_cols])
        names = list(self.base.column_names) + self.aug_names
        try:
            return self.base.with_design(
                x, names, context="bias-corrected design", n_alpha=self.n_aug, aug_kind=self.aug_kind.value,
            )
        except RankDeficiencyError as e:
            raise RankDeficiencyError(
                f"{e} - the group-level regressors duplicate the covariates, which happens when groups "
                f"hold too few observations to vary within group (e.g. every group has size 1)",
                columns=e.columns,
            )

    def augment_rows(self, x_rows: np.ndarray, group_codes: np.ndarray) -> np.ndarray:
        """Added regressors for new rows of known groups."""
        z_rows = np.asarray(x_rows, dtype=float)[:, list(self.base.z_columns)]
        coefs = self.group_coefficients[np.asarray(group_codes, dtype=int)]
        return np.einsum("nd,ndq->nq", z_rows, coefs)


def _non_intercept_columns(ds: GroupedDataset) -> Tuple[int, ...]:
    return tuple(j for j in range(1, ds.n_fixed) if j not in ds.z_columns)


def augment_group_means(ds: GroupedDataset) -> AugmentedDataset:
    """
    Append the group mean of every non-intercept covariate.

    Args:
        ds: Dataset with an intercept-only Z

    Returns:
        AugmentedDataset of kind GROUP_MEANS
    """
    if not ds.is_random_intercept:
        raise DataValidationError("Group-mean augmentation requires an intercept-only Z; use augment_projection")
    cols = _non_intercept_columns(ds)
    means = ds.group_means(ds.x[:, list(cols)])
    aug = means[ds.group_index]
    return AugmentedDataset(
        base=ds, aug_cols=_frozen(aug), aug_kind=AugmentationKind.GROUP_MEANS, source_columns=cols,
        group_coefficients=_frozen(means[:, None, :]),
    )


def projection_coefficients(z_g: np.ndarray, x_g: np.ndarray) -> np.ndarray:
    """
    pinv(Z_g) @ X_g via a rank-revealing SVD.

    Singular values below 1e-10 * ||Z_g|| are treated as zero, so the implied
    projection Z_g pinv(Z_g) is well defined even for singular Z_g'Z_g.
    """
    u, s, vt = linalg.svd(z_g, full_matrices=False)
    keep = s > PINV_RTOL * (s[0] if s.size else 0.0)
    return (vt[keep].T / s[keep]) @ (u[:, keep].T @ x_g)


def augment_projection(ds: GroupedDataset) -> AugmentedDataset:
    """
    Append within-group projections of the covariates onto Z.

    Each non-intercept column of X that is not itself a Z column is replaced
    by Z_g (Z_g'Z_g)^- Z_g' X_g within every group g.

    Args:
        ds: Dataset with d >= 1

    Returns:
        AugmentedDataset of kind WITHIN_PROJECTION
    """
    cols = _non_intercept_columns(ds)
    z = ds.z
    x_src = ds.x[:, list(cols)]
    aug = np.empty_like(x_src)
    coefs = np.empty((ds.n_groups, ds.n_random, len(cols)))
    for g in range(ds.n_groups):
        rows = ds.group_slice(g)
        coefs[g] = projection_coefficients(z[rows], x_src[rows])
        aug[rows] = z[rows] @ coefs[g]
    return AugmentedDataset(
        base=ds, aug_cols=_frozen(aug), aug_kind=AugmentationKind.WITHIN_PROJECTION, source_columns=cols,
        group_coefficients=_frozen(coefs),
    )


def augment(ds: GroupedDataset) -> AugmentedDataset:
    """Group means for a random-intercept design, projections otherwise."""
    return augment_group_means(ds) if ds.is_random_intercept else augment_projection(ds)
