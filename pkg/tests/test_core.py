"""Tests for skdmar core primitives."""

import numpy as np
import pytest

from skdmar.core import (
    build_product_indicator,
    child_seed,
    effective_overlap,
    make_folds,
    propensity_floor,
    stratified_assignment,
)
from skdmar.errors import DataError, ValidationError
from skdmar.models import Dataset


def _four_rows():
    # (T, R) = (1,1), (0,1), (1,0), (0,0)
    return Dataset(
        covariates=np.ones((4, 1)),
        outcome_label=[1, 1, 0, 0],
        treatment=[1, 0, 1, 0],
        outcome_values=[2.0, 3.0, np.nan, np.nan],
    )


class TestProductIndicator:
    def test_arm_one(self):
        gamma = build_product_indicator(_four_rows(), 1)
        assert gamma.values.tolist() == [1, 0, 0, 0]
        assert gamma.arm == 1

    def test_arm_zero(self):
        assert build_product_indicator(_four_rows(), 0).values.tolist() == [0, 1, 0, 0]

    def test_missing_treatment_uses_product_rule(self):
        # (T, R_T, R_Y) = (1,1,1), (1,0,1), (0,1,1)
        dataset = Dataset(
            covariates=np.ones((3, 1)),
            outcome_label=[1, 0, 1],
            treatment_label=[1, 0, 1],
            response_label=[1, 1, 1],
            treatment=[1, 1, 0],
            outcome_values=[1.0, 5.0, 2.0],
        )
        assert build_product_indicator(dataset, 1).values.tolist() == [1, 0, 0]
        assert build_product_indicator(dataset, 0).values.tolist() == [0, 0, 1]

    def test_rate(self):
        assert build_product_indicator(_four_rows(), 1).rate == 0.25

    def test_bad_arm(self):
        with pytest.raises(ValidationError, match="arm must be 0 or 1"):
            build_product_indicator(_four_rows(), 2)


class TestMakeFolds:
    def test_equal_split(self):
        folds = make_folds(4, 2, seed=0)
        assert folds.sizes().tolist() == [2, 2]

    def test_remainder(self):
        folds = make_folds(5, 2, seed=0)
        assert sorted(folds.sizes().tolist()) == [2, 3]

    def test_deterministic(self):
        a = make_folds(101, 5, seed=7)
        b = make_folds(101, 5, seed=7)
        np.testing.assert_array_equal(a.assignment, b.assignment)

    def test_seed_changes_split(self):
        a = make_folds(100, 2, seed=1)
        b = make_folds(100, 2, seed=2)
        assert not np.array_equal(a.assignment, b.assignment)

    def test_fold_and_complement_partition(self):
        folds = make_folds(23, 3, seed=0)
        for k in (1, 2, 3):
            both = np.sort(np.concatenate([folds.fold(k), folds.complement(k)]))
            np.testing.assert_array_equal(both, np.arange(23))

    def test_too_few_folds(self):
        with pytest.raises(ValidationError):
            make_folds(10, 1, seed=0)

    def test_too_few_samples(self):
        with pytest.raises(ValidationError):
            make_folds(2, 3, seed=0)


class TestStratifiedAssignment:
    def test_balances_each_stratum(self):
        strata = np.array([1] * 7 + [0] * 13)
        assignment = stratified_assignment(strata, 3, seed=4)
        for k in (1, 2, 3):
            ones = np.count_nonzero(strata[assignment == k] == 1)
            assert ones in (2, 3)
        assert set(assignment.tolist()) == {1, 2, 3}


class TestEffectiveOverlap:
    def test_constant(self):
        assert effective_overlap(np.full(10, 0.1)) == pytest.approx(0.1)

    def test_harmonic_mean(self):
        assert effective_overlap(np.array([0.5, 0.25])) == pytest.approx(1.0 / 3.0)

    def test_rejects_zero(self):
        with pytest.raises(DataError):
            effective_overlap(np.array([0.5, 0.0]))

    def test_rejects_empty(self):
        with pytest.raises(DataError):
            effective_overlap(np.array([]))


def test_propensity_floor():
    assert propensity_floor(100) == 0.005


def test_child_seed_is_stable_and_keyed():
    assert child_seed(5, 1, 2) == child_seed(5, 1, 2)
    assert child_seed(5, 1, 2) != child_seed(5, 2, 1)
    assert child_seed(5) != child_seed(6)
