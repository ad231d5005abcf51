"""Tests for skdmar models."""

import numpy as np
import pydantic
import pytest

from skdmar.estimators import estimate_ate
from skdmar.errors import ContractViolation, DataError, NumericalError
from skdmar.models import (
    AteReport,
    Dataset,
    DgpName,
    DgpSpec,
    EstimatorMetrics,
    FoldAssignment,
    LambdaMode,
    LambdaPolicy,
    LearnerSpec,
    MetricsTable,
    NuisanceEstimate,
    SolverResult,
)


def _dataset():
    return Dataset(
        covariates=np.column_stack([np.ones(4), np.arange(4.0)]),
        outcome_label=[1, 0, 1, 0],
        treatment=[1, 1, 0, 0],
        outcome_values=[1.5, 99.0, -0.5, 99.0],
    )


class TestDataset:
    def test_unlabeled_outcomes_are_masked(self):
        dataset = _dataset()
        assert np.isnan(dataset.outcome_values[1])
        assert np.isnan(dataset.outcome_values[3])
        assert dataset.n == 4
        assert dataset.d == 2

    def test_arrays_are_read_only(self):
        dataset = _dataset()
        with pytest.raises(ValueError):
            dataset.covariates[0, 0] = 5.0

    def test_input_is_copied(self):
        X = np.ones((3, 2))
        dataset = Dataset(
            covariates=X, outcome_label=[1, 1, 1], treatment=[1, 0, 1], outcome_values=[1, 2, 3]
        )
        X[0, 0] = 7.0
        assert dataset.covariates[0, 0] == 1.0

    def test_outcome_at_labeled(self):
        np.testing.assert_array_equal(_dataset().outcome_at([0, 2]), [1.5, -0.5])

    def test_outcome_at_unlabeled_raises(self):
        with pytest.raises(ContractViolation):
            _dataset().outcome_at([0, 1])

    def test_contract_violation_is_lookup_error(self):
        with pytest.raises(LookupError):
            _dataset().masked_outcome([True, True, False, False])

    def test_masked_outcome(self):
        np.testing.assert_array_equal(
            _dataset().masked_outcome([True, False, False, False]), [1.5, 0.0, 0.0, 0.0]
        )

    def test_non_binary_label(self):
        with pytest.raises(DataError, match="0/1"):
            Dataset(
                covariates=np.ones((2, 1)),
                outcome_label=[1, 2],
                treatment=[1, 0],
                outcome_values=[1.0, 1.0],
            )

    def test_labeled_row_needs_outcome(self):
        with pytest.raises(DataError, match="finite outcome"):
            Dataset(
                covariates=np.ones((2, 1)),
                outcome_label=[1, 1],
                treatment=[1, 0],
                outcome_values=[1.0, np.nan],
            )

    def test_length_mismatch(self):
        with pytest.raises(DataError, match="length"):
            Dataset(
                covariates=np.ones((3, 1)),
                outcome_label=[1, 1],
                treatment=[1, 0],
                outcome_values=[1.0, 1.0],
            )

    def test_subset_and_replace(self):
        dataset = _dataset()
        sub = dataset.subset([2, 3])
        assert sub.n == 2
        assert sub.treatment.tolist() == [0.0, 0.0]
        moved = dataset.replace(outcome_values=[0.0, 0.0, 4.0, 0.0])
        assert moved.outcome_values[2] == 4.0
        assert np.isnan(moved.outcome_values[1])

    def test_arm_indicator_skips_unknown_treatment(self):
        dataset = Dataset(
            covariates=np.ones((3, 1)),
            outcome_label=[1, 0, 0],
            treatment_label=[1, 0, 1],
            treatment=[1, 1, 0],
            outcome_values=[1.0, np.nan, np.nan],
        )
        assert dataset.arm_indicator(1).tolist() == [1, 0, 0]
        assert np.isnan(dataset.treatment[1])


class TestFoldAssignment:
    def test_unbalanced_sizes_rejected(self):
        with pytest.raises(DataError, match="differ"):
            FoldAssignment(n=5, k_folds=2, assignment=[1, 1, 1, 1, 2])

    def test_empty_fold_rejected(self):
        with pytest.raises(DataError, match="non-empty"):
            FoldAssignment(n=2, k_folds=3, assignment=[1, 2])


class TestNuisanceEstimate:
    def test_evaluate_clips_and_counts(self):
        estimate = NuisanceEstimate(
            arm=1,
            or_fn=lambda X: X[:, 0],
            ps_fn=lambda X: np.array([1e-9, 0.3, 1.2]),
            method_tag="test",
            ps_floor=0.01,
        )
        evaluation = estimate.evaluate(np.ones((3, 1)))
        np.testing.assert_allclose(evaluation.ps_values, [0.01, 0.3, 1.0])
        assert evaluation.n_clipped == 2

    def test_non_finite_values(self):
        estimate = NuisanceEstimate(
            arm=0,
            or_fn=lambda X: np.full(X.shape[0], np.nan),
            ps_fn=lambda X: np.full(X.shape[0], 0.5),
            method_tag="broken",
            ps_floor=0.01,
        )
        with pytest.raises(NumericalError):
            estimate.evaluate(np.ones((2, 1)))


class TestSolverResult:
    def test_converged_needs_certificate(self):
        with pytest.raises(NumericalError):
            SolverResult(
                coefficients=np.zeros(2),
                objective=1.0,
                kkt_residual=1e-3,
                iterations=3,
                converged=True,
                tol=1e-7,
            )

    def test_degraded_only_when_clamped(self):
        result = SolverResult(
            coefficients=np.zeros(2),
            objective=1.0,
            kkt_residual=0.0,
            iterations=1,
            converged=True,
            tol=1e-7,
            clamp_count=2,
        )
        assert result.degraded is True


class TestLambdaPolicy:
    def test_fixed(self):
        policy = LambdaPolicy.fixed(0.1, 0.2)
        assert policy.mode == LambdaMode.FIXED
        assert (policy.lambda_or, policy.lambda_ps) == (0.1, 0.2)

    def test_fixed_needs_both(self):
        with pytest.raises(pydantic.ValidationError):
            LambdaPolicy(mode="fixed", lambda_or=0.1)

    def test_learner_tag(self):
        assert LearnerSpec().tag == "lasso_linear+offset_logistic_direct"


class TestDgpSpec:
    def test_scalar_gamma_broadcasts(self):
        spec = DgpSpec(dgp="a", n=10_000, d=51, gamma_target=0.1)
        assert spec.gamma_target == (0.1, 0.1)
        assert spec.header() == "DGP (a) N=10000, d=51, s_alpha=3, s_beta=3, gamma=0.1 (N*gamma=1000)"

    def test_supervised_ignores_gamma(self):
        spec = DgpSpec(dgp="d", n=300, d=10, gamma_target=0.3)
        assert spec.gamma_target is None
        assert spec.dgp.supervised

    def test_decaying_design_needs_gamma(self):
        with pytest.raises(pydantic.ValidationError):
            DgpSpec(dgp="b", n=100, d=10)

    def test_gamma_range(self):
        with pytest.raises(pydantic.ValidationError):
            DgpSpec(dgp="a", n=100, d=10, gamma_target=0.6)

    def test_sparsity_bound(self):
        with pytest.raises(pydantic.ValidationError):
            DgpSpec(dgp="a", n=100, d=4, s_alpha=5, gamma_target=0.1)

    def test_unknown_dgp(self):
        with pytest.raises(pydantic.ValidationError):
            DgpSpec(dgp="z", n=100, d=10, gamma_target=0.1)

    def test_quadratic_designs(self):
        assert [name.value for name in DgpName if name.quadratic] == ["c", "e"]


class TestMetricsTable:
    def test_frame_columns(self):
        row = EstimatorMetrics(
            estimator="oracle", bias=0.01, rmse=0.05, length=0.2,
            coverage=0.95, esd=0.05, asd=0.05, n_ok=20, n_fail=0,
        )
        table = MetricsTable(header="DGP (a)", mu0=6.0, n_reps=20, rows=[row])
        frame = table.to_frame()
        assert list(frame.columns) == [
            "estimator", "bias", "rmse", "length", "coverage", "esd", "asd", "n_fail"
        ]
        assert frame.loc[0, "coverage"] == 0.95
        assert table.render().row_count == 1


class TestAteReport:
    def test_interval_must_contain_estimate(self, design_a, draw_a):
        report = estimate_ate("oracle", draw_a, oracle=design_a[1])
        records = dict(report.to_records())
        assert list(records)[:4] == ["mu_hat", "se", "ci_lo", "ci_hi"]
        assert records["method"] == "oracle"
        assert records["se"] == pytest.approx(np.sqrt(report.sigma_hat / report.n))
        with pytest.raises(NumericalError):
            AteReport(**{**dict(report), "ci": (report.mu_hat + 1.0, report.mu_hat + 2.0)})
