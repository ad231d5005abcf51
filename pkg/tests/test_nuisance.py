"""Tests for the nuisance learners."""

import numpy as np
import pytest
from scipy.special import expit

from skdmar.core import build_product_indicator, make_folds
from skdmar.errors import DataError, ValidationError
from skdmar.models import (
    Dataset,
    LambdaPolicy,
    LearnerSpec,
    OutcomeMethod,
    PropensityMethod,
    SolverConfig,
)
from skdmar.nuisance import (
    LogisticPredictor,
    fit_nuisance,
    fit_or_lasso,
    fit_ps_constant_mcar,
    fit_ps_offset_logistic,
    fit_ps_product,
    fit_ps_treatment_label,
    get_learner,
)


def _learner(lambda_or=0.0, lambda_ps=0.0, **kwargs):
    return LearnerSpec(
        lambda_policy=LambdaPolicy.fixed(lambda_or, lambda_ps),
        solver=SolverConfig(tol=1e-10, max_iter=100_000),
        **kwargs,
    )


class TestOutcomeLasso:
    def test_noiseless_recovery(self, make_dataset):
        dataset = make_dataset(n=120, d=4, noise=0.0)
        train = np.arange(dataset.n)
        fit = fit_or_lasso(dataset, 1, train, _learner())
        rows = train[build_product_indicator(dataset, 1).values == 1]
        predicted = fit.predictor(dataset.covariates[rows])
        np.testing.assert_allclose(predicted, dataset.outcome_at(rows), atol=1e-6)
        assert fit.converged

    def test_constant_outcome(self):
        n = 30
        dataset = Dataset(
            covariates=np.ones((n, 1)),
            outcome_label=np.ones(n),
            treatment=np.tile([1.0, 0.0], n // 2),
            outcome_values=np.full(n, 4.0),
        )
        fit = fit_or_lasso(dataset, 0, np.arange(n), _learner())
        np.testing.assert_allclose(fit.predictor(np.ones((5, 1))), 4.0, atol=1e-8)

    def test_no_labeled_rows_in_arm(self, make_dataset):
        dataset = make_dataset(n=40)
        control = np.flatnonzero(dataset.treatment == 0)
        with pytest.raises(DataError, match="no labeled rows in arm 1"):
            fit_or_lasso(dataset, 1, control, _learner())

    def test_cross_validated_penalty_is_recorded(self, make_dataset):
        dataset = make_dataset(n=200, d=5)
        learner = LearnerSpec(n_lambda=6, cv_folds=3)
        fit = fit_or_lasso(dataset, 1, np.arange(dataset.n), learner, seed=4)
        assert fit.lambda_used["alpha"] > 0.0
        assert fit.coefficients["alpha"].shape == (5,)


class TestOffsetLogisticPropensity:
    def test_zero_slope_returns_link_at_log_rate(self, make_dataset):
        dataset = make_dataset(n=100)
        train = np.arange(dataset.n)
        fit = fit_ps_offset_logistic(dataset, 1, train, _learner(lambda_ps=1e3))
        rate = build_product_indicator(dataset, 1).rate
        np.testing.assert_array_equal(fit.coefficients["beta"], np.zeros(dataset.d))
        np.testing.assert_allclose(
            fit.predictor(dataset.covariates), expit(np.log(rate)), rtol=1e-12
        )

    def test_constant_indicator_raises(self, make_dataset):
        dataset = make_dataset(n=40)
        control = np.flatnonzero(dataset.treatment == 0)
        with pytest.raises(DataError, match="degenerate labels"):
            fit_ps_offset_logistic(dataset, 1, control, _learner(lambda_ps=0.1))


class TestProductPropensity:
    def test_arms_share_the_labeling_model(self, make_dataset):
        dataset = make_dataset(n=200, label_rate=0.4)
        train = np.arange(dataset.n)
        learner = _learner(lambda_ps=0.01)
        arm1 = fit_ps_product(dataset, 1, train, learner)
        arm0 = fit_ps_product(dataset, 0, train, learner)
        X = dataset.covariates
        labeling = LogisticPredictor(
            arm1.coefficients["beta_label"], float(np.log(dataset.outcome_label.mean()))
        )(X)
        np.testing.assert_allclose(arm1.predictor(X) + arm0.predictor(X), labeling, rtol=1e-12)

    def test_mcar_with_full_labels_is_treatment_propensity(self, make_dataset):
        dataset = make_dataset(n=100, label_rate=1.0)
        fit = fit_ps_constant_mcar(dataset, 0, np.arange(dataset.n), _learner(lambda_ps=0.01))
        pi = LogisticPredictor(fit.coefficients["beta_treatment"], complement=True)
        np.testing.assert_allclose(fit.predictor(dataset.covariates), pi(dataset.covariates))

    def test_mcar_needs_labels(self):
        dataset = Dataset(
            covariates=np.ones((4, 1)),
            outcome_label=np.zeros(4),
            treatment=[1, 0, 1, 0],
            outcome_values=np.full(4, np.nan),
        )
        with pytest.raises(DataError, match="no labeled rows"):
            fit_ps_constant_mcar(dataset, 1, np.arange(4), _learner(lambda_ps=0.1))


class TestTreatmentLabelPropensity:
    def _dataset(self, n=160, seed=0):
        rng = np.random.default_rng(seed)
        X = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
        t = np.tile([1.0, 0.0], n // 2)
        rt = (rng.random(n) < 0.8).astype(int)
        ry = (rng.random(n) < 0.6).astype(int)
        rt[:4] = 1
        ry[:4] = 1
        y = X[:, 1] + t + rng.standard_normal(n)
        label = rt * ry
        return Dataset(
            covariates=X,
            outcome_label=label,
            treatment_label=rt,
            response_label=ry,
            treatment=t,
            outcome_values=np.where(label == 1, y, np.nan),
        )

    def test_product_of_two_fits(self):
        dataset = self._dataset()
        fit = fit_ps_treatment_label(dataset, 1, np.arange(dataset.n), _learner(lambda_ps=0.02))
        assert set(fit.coefficients) == {"beta_response", "beta_treatment"}
        values = fit.predictor(dataset.covariates)
        assert np.all((values > 0) & (values < 1))

    def test_full_response_skips_response_model(self, make_dataset):
        dataset = make_dataset(n=100, label_rate=1.0)
        fit = fit_ps_treatment_label(dataset, 1, np.arange(dataset.n), _learner(lambda_ps=0.02))
        assert "beta_response" not in fit.coefficients
        treat = LogisticPredictor(fit.coefficients["beta_treatment"], float(np.log(0.5)))
        np.testing.assert_allclose(fit.predictor(dataset.covariates), treat(dataset.covariates))


class TestRegistry:
    def test_lookup(self):
        assert get_learner("or", "lasso_linear") is not None
        assert get_learner("ps", "constant_mcar") is not None

    def test_unknown(self):
        with pytest.raises(ValidationError, match="Unknown ps learner: forest"):
            get_learner("ps", "forest")

    def test_oracle_learner_needs_oracle(self, make_dataset):
        learner = LearnerSpec(or_method=OutcomeMethod.ORACLE, ps_method=PropensityMethod.ORACLE)
        with pytest.raises(ValidationError, match="truth oracle"):
            fit_nuisance(make_dataset(n=20), 1, np.arange(20), learner)


class TestFitNuisance:
    def test_pair_and_tags(self, make_dataset, fixed_learner):
        dataset = make_dataset(n=200)
        estimate = fit_nuisance(dataset, 1, np.arange(dataset.n), fixed_learner)
        assert estimate.method_tag == "lasso_linear+offset_logistic_direct"
        assert set(estimate.lambda_used) == {"or_alpha", "ps_beta"}
        assert estimate.ps_floor == pytest.approx(1 / 400)
        evaluation = estimate.evaluate(dataset.covariates)
        assert evaluation.or_values.shape == (200,)
        assert np.all(evaluation.ps_values >= estimate.ps_floor)

    def test_held_out_outcomes_do_not_leak(self, make_dataset, fixed_learner):
        dataset = make_dataset(n=200)
        folds = make_folds(dataset.n, 2, seed=5)
        held_out = folds.fold(1)
        poisoned = dataset.outcome_values.copy()
        poisoned[held_out] += 1000.0
        other = dataset.replace(outcome_values=poisoned)
        a = fit_nuisance(dataset, 1, folds.complement(1), fixed_learner, seed=9)
        b = fit_nuisance(other, 1, folds.complement(1), fixed_learner, seed=9)
        for name in a.coefficients:
            np.testing.assert_array_equal(a.coefficients[name], b.coefficients[name])
        X = dataset.covariates[held_out]
        np.testing.assert_array_equal(a.evaluate(X).or_values, b.evaluate(X).or_values)
