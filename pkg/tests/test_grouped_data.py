"""
Tests for grouped dataset construction and the bias-correction augmentations.
"""

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.data_processing.grouped_data import (
    AugmentationKind,
    augment,
    augment_group_means,
    augment_projection,
    build_dataset,
    dataset_from_frame,
    dataset_to_frame,
    load_csv,
    projection_coefficients,
)
from src.utils.exceptions import DataValidationError, RankDeficiencyError


def _design(x):
    return np.column_stack([np.ones(len(x)), x])


class TestBuildDataset:
    """Validation and ordering in build_dataset."""

    def test_rows_are_sorted_by_group(self):
        y = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        x = _design([0.1, 0.2, 0.3, 0.4, 0.5])
        ds = build_dataset(y, x, ["b", "a", "b", "a", "c"])
        assert ds.group_labels.tolist() == ["a", "b", "c"]
        assert ds.group_sizes.tolist() == [2, 2, 1]
        assert_array_equal(ds.y, [2.0, 4.0, 1.0, 3.0, 5.0])
        assert_array_equal(ds.to_input_order(ds.y), y)

    def test_singleton_groups_are_reported(self):
        ds = build_dataset([1.0, 2.0, 3.0], _design([0.0, 1.0, 3.0]), [1, 1, 2])
        assert ds.diagnostics["singleton_groups"] == [2]

    def test_intercept_required(self):
        with pytest.raises(DataValidationError):
            build_dataset([1.0, 2.0], np.array([[0.5], [1.0]]), [0, 1])

    def test_rank_deficient_design_names_columns(self):
        x1 = np.array([1.0, 2.0, 3.0, 4.0])
        x = np.column_stack([np.ones(4), x1, 2.0 * x1])
        with pytest.raises(RankDeficiencyError) as info:
            build_dataset([0.0, 1.0, 0.0, 1.0], x, [0, 0, 1, 1], column_names=["(Intercept)", "a", "b"])
        assert set(info.value.columns) & {"a", "b"}

    def test_non_finite_outcome(self):
        with pytest.raises(DataValidationError):
            build_dataset([1.0, np.nan], _design([0.0, 1.0]), [0, 1])

    def test_length_mismatch(self):
        with pytest.raises(DataValidationError):
            build_dataset([1.0, 2.0, 3.0], _design([0.0, 1.0]), [0, 1])

    def test_invalid_z_spec(self):
        with pytest.raises(DataValidationError):
            build_dataset([1.0, 2.0, 3.0], _design([0.0, 1.0, 2.0]), [0, 0, 1], z_spec=[5])

    def test_group_sums_and_means(self):
        ds = build_dataset([1.0, 3.0, 10.0], _design([0.0, 1.0, 2.0]), [0, 0, 1])
        assert_allclose(ds.group_sums(ds.y), [4.0, 10.0])
        assert_allclose(ds.group_means(ds.y), [2.0, 10.0])


class TestResampleGroups:
    """Whole-group resampling used by the cluster bootstrap."""

    def test_duplicated_groups_become_distinct(self, gaussian_data):
        sample = gaussian_data.resample_groups([3, 3, 0])
        assert sample.n_groups == 3
        assert sample.group_labels.tolist() == [0, 1, 2]
        rows = gaussian_data.group_slice(3)
        assert_array_equal(sample.y[sample.group_slice(0)], gaussian_data.y[rows])
        assert_array_equal(sample.y[sample.group_slice(1)], gaussian_data.y[rows])
        assert sample.diagnostics["resampled_from"] == [3, 3, 0]

    def test_design_notes_survive(self, gaussian_data):
        design = augment(gaussian_data).to_dataset()
        sample = design.resample_groups([0, 1])
        assert sample.diagnostics["n_alpha"] == 1


class TestFrames:
    """CSV contract."""

    def test_frame_round_trip(self):
        df = pd.DataFrame({"y": [1.0, 0.0, 1.0, 0.0], "group": ["g2", "g1", "g1", "g2"],
                           "x": [0.5, -0.1, 0.3, 0.9]})
        ds = dataset_from_frame(df)
        assert ds.column_names == ("(Intercept)", "x")
        back = dataset_to_frame(ds)
        pd.testing.assert_frame_equal(back, df, check_dtype=False)

    def test_missing_group_column(self):
        with pytest.raises(DataValidationError):
            dataset_from_frame(pd.DataFrame({"y": [1.0, 0.0], "x": [0.1, 0.2]}))

    def test_random_slopes_must_be_covariates(self):
        df = pd.DataFrame({"y": [1.0, 0.0, 1.0], "group": [0, 0, 1], "x": [0.5, -0.1, 0.3]})
        with pytest.raises(DataValidationError):
            dataset_from_frame(df, z_columns=["w"])

    def test_load_csv(self, tmp_path):
        path = tmp_path / "data.csv"
        pd.DataFrame({"y": [1.0, 0.0, 1.0], "group": [0, 0, 1], "x": [0.5, -0.1, 0.3]}).to_csv(path, index=False)
        ds = load_csv(path, covariates=["x"])
        assert ds.n_obs == 3
        assert ds.n_groups == 2

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(DataValidationError):
            load_csv(tmp_path / "absent.csv")


class TestAugmentation:
    """Group-mean and within-projection regressors."""

    def test_group_means(self, gaussian_data):
        aug = augment_group_means(gaussian_data)
        assert aug.aug_kind == AugmentationKind.GROUP_MEANS
        expected = gaussian_data.group_means(gaussian_data.x[:, 1])[gaussian_data.group_index]
        assert_allclose(aug.aug_cols[:, 0], expected)
        design = aug.to_dataset()
        assert design.column_names[-1] == "mean_x"
        assert design.diagnostics["n_alpha"] == 1

    def test_projection_residuals_orthogonal_to_z(self):
        rng = np.random.default_rng(4)
        groups = np.repeat(np.arange(5), 6)
        x = np.column_stack([np.ones(30), rng.normal(size=30), rng.normal(size=30)])
        x[:, 1] += x[:, 2] * 0.7
        ds = build_dataset(rng.normal(size=30), x, groups, z_spec=[2])
        aug = augment_projection(ds)
        assert aug.source_columns == (1,)
        resid = ds.x[:, 1] - aug.aug_cols[:, 0]
        for g in range(ds.n_groups):
            rows = ds.group_slice(g)
            assert_allclose(ds.z[rows].T @ resid[rows], 0.0, atol=1e-10)

    def test_augment_rows_rebuilds_training_columns(self, gaussian_data):
        aug = augment(gaussian_data)
        rebuilt = aug.augment_rows(gaussian_data.x, gaussian_data.group_index)
        assert_allclose(rebuilt, aug.aug_cols)

    def test_singleton_groups_make_means_collinear(self):
        ds = build_dataset([0.0, 1.0, 2.0, 3.0], _design([0.3, 1.0, -0.5, 2.0]), [0, 1, 2, 3])
        with pytest.raises(RankDeficiencyError):
            augment(ds).to_dataset()

    def test_group_means_require_intercept_only_z(self):
        rng = np.random.default_rng(5)
        x = np.column_stack([np.ones(8), rng.normal(size=8)])
        ds = build_dataset(rng.normal(size=8), x, np.repeat([0, 1], 4), z_spec=[1])
        with pytest.raises(DataValidationError):
            augment_group_means(ds)

    def test_projection_is_idempotent(self):
        rng = np.random.default_rng(6)
        groups = np.repeat(np.arange(6), 5)
        x = np.column_stack([np.ones(30), rng.normal(size=30), rng.normal(size=30)])
        x[groups == 2, 2] = 1.5
        ds = build_dataset(rng.normal(size=30), x, groups, z_spec=[2])
        aug = augment_projection(ds).aug_cols
        for g in range(ds.n_groups):
            rows = ds.group_slice(g)
            again = ds.z[rows] @ projection_coefficients(ds.z[rows], aug[rows])
            assert_allclose(again, aug[rows], atol=1e-10)

    def test_group_means_ignore_row_order_within_groups(self):
        rng = np.random.default_rng(7)
        groups = np.repeat(np.arange(8), 4)
        x = _design(rng.normal(size=32))
        y = rng.normal(size=32)
        shuffled = np.concatenate([rng.permutation(np.flatnonzero(groups == g)) for g in range(8)])
        original = build_dataset(y, x, groups)
        permuted = build_dataset(y[shuffled], x[shuffled], groups[shuffled])
        aug_original = original.to_input_order(augment_group_means(original).aug_cols)
        aug_permuted = permuted.to_input_order(augment_group_means(permuted).aug_cols)
        assert_allclose(aug_permuted, aug_original[shuffled], rtol=1e-12, atol=1e-14)
