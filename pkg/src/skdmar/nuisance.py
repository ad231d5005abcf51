"""
Nuisance learners: outcome regressions m̂(j, x) and product propensities γ̂(j, x).

Each learner fits on a training slice of row indices and returns an
evaluable predictor. ``fit_nuisance`` pairs one outcome learner with one
propensity learner according to a ``LearnerSpec``.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import partial
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.special import expit

from .core import build_product_indicator, child_seed, propensity_floor
from .errors import DataError, ValidationError
from .models import (
    Dataset,
    LambdaMode,
    LearnerSpec,
    NuisanceEstimate,
    OutcomeMethod,
    PropensityMethod,
    SolverResult,
)
from .solvers import PenalizedProblem, cross_validate_lambda

if TYPE_CHECKING:
    from .simulate import TruthOracle

logger = logging.getLogger("skdmar.nuisance")


@dataclass(frozen=True)
class LinearPredictor:
    """x -> x'α."""

    coefficients: np.ndarray

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return X @ self.coefficients


@dataclass(frozen=True)
class LogisticPredictor:
    """x -> g(x'β + offset), optionally complemented to 1 - g(...)."""

    coefficients: np.ndarray
    offset: float = 0.0
    complement: bool = False

    def __call__(self, X: np.ndarray) -> np.ndarray:
        p = expit(X @ self.coefficients + self.offset)
        return 1.0 - p if self.complement else p


@dataclass(frozen=True)
class ProductPredictor:
    """x -> first(x)·second(x)."""

    first: Callable[[np.ndarray], np.ndarray]
    second: Callable[[np.ndarray], np.ndarray]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.first(X) * self.second(X)


@dataclass(frozen=True)
class ConstantPredictor:
    value: float

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.full(X.shape[0], self.value)


@dataclass
class ComponentFit:
    """A fitted predictor with the bookkeeping of the solves behind it."""

    predictor: Callable[[np.ndarray], np.ndarray]
    coefficients: dict[str, np.ndarray] = field(default_factory=dict)
    lambda_used: dict[str, float] = field(default_factory=dict)
    converged: bool = True
    degraded: bool = False

    def absorb(self, result: SolverResult, name: str, lam: float) -> None:
        self.coefficients[name] = result.coefficients
        self.lambda_used[name] = lam
        self.converged = self.converged and result.converged
        self.degraded = self.degraded or result.degraded


def _choose_lambda(
    problem: PenalizedProblem, fixed: Optional[float], learner: LearnerSpec, seed: int
) -> float:
    if learner.lambda_policy.mode == LambdaMode.FIXED:
        return float(fixed)
    return cross_validate_lambda(
        problem,
        n_cv_folds=learner.cv_folds,
        seed=seed,
        config=learner.solver,
        n_lambda=learner.n_lambda,
        min_ratio=learner.lambda_min_ratio,
    )


def solve_penalized(
    problem: PenalizedProblem, fixed: Optional[float], learner: LearnerSpec, seed: int, what: str
) -> tuple[SolverResult, float]:
    lam = _choose_lambda(problem, fixed, learner, seed)
    result = problem.fit(lam, learner.solver)
    if not result.converged:
        logger.warning(
            "%s did not converge in %d iterations (KKT residual %.3g)",
            what,
            result.iterations,
            result.kkt_residual,
        )
    return result, lam


def _require_both_classes(labels: np.ndarray, what: str) -> None:
    if labels.size == 0 or labels.min() == labels.max():
        state = "empty" if labels.size == 0 else f"all {int(labels[0])}"
        raise DataError(f"degenerate labels for the {what}: {state} on the training slice")


def fit_or_lasso(
    dataset: Dataset, arm: int, train_indices, learner: Optional[LearnerSpec] = None, seed: int = 0
) -> ComponentFit:
    """Lasso outcome regression of Y on X over labeled rows of ``arm``.

    Raises:
        DataError: If the training slice has no labeled row in ``arm``.
    """
    learner = learner or LearnerSpec()
    train = np.asarray(train_indices, dtype=np.intp)
    gamma = build_product_indicator(dataset, arm).values[train]
    rows = train[gamma == 1]
    if rows.size == 0:
        raise DataError(f"no labeled rows in arm {arm} to fit the outcome regression")
    if rows.size < 2:
        logger.warning("outcome regression for arm %d rests on a single row", arm)
    problem = PenalizedProblem("lasso_ls", dataset.covariates[rows], dataset.outcome_at(rows))
    result, lam = solve_penalized(problem, learner.lambda_policy.lambda_or, learner, seed, "outcome Lasso")
    fit = ComponentFit(LinearPredictor(result.coefficients))
    fit.absorb(result, "alpha", lam)
    return fit


def _fit_offset_logistic(
    X: np.ndarray, labels: np.ndarray, learner: LearnerSpec, seed: int, what: str
) -> tuple[SolverResult, float, float]:
    """ℓ1 logistic fit with the offset fixed at log of the label mean."""
    _require_both_classes(labels, what)
    offset = float(np.log(labels.mean()))
    problem = PenalizedProblem(
        "logistic_offset", X, labels.astype(float), offset=np.full(labels.shape[0], offset)
    )
    result, lam = solve_penalized(problem, learner.lambda_policy.lambda_ps, learner, seed, what)
    return result, lam, offset


def _fit_treatment_ps(
    X: np.ndarray, treatment: np.ndarray, learner: LearnerSpec, seed: int
) -> tuple[SolverResult, float]:
    _require_both_classes(treatment, "treatment propensity")
    problem = PenalizedProblem("logistic_offset", X, treatment.astype(float))
    return solve_penalized(problem, learner.lambda_policy.lambda_ps, learner, seed, "treatment propensity")


def fit_ps_offset_logistic(
    dataset: Dataset, arm: int, train_indices, learner: Optional[LearnerSpec] = None, seed: int = 0
) -> ComponentFit:
    """Direct product propensity γ̂(j, x) = g(x'β̂ + log γ̂), fitted on Γ^{(j)}.

    Raises:
        DataError: If Γ^{(j)} is constant on the training slice.
    """
    learner = learner or LearnerSpec()
    train = np.asarray(train_indices, dtype=np.intp)
    gamma = build_product_indicator(dataset, arm).values[train]
    result, lam, offset = _fit_offset_logistic(
        dataset.covariates[train], gamma, learner, seed, f"product propensity of arm {arm}"
    )
    fit = ComponentFit(LogisticPredictor(result.coefficients, offset))
    fit.absorb(result, "beta", lam)
    return fit


def fit_ps_product(
    dataset: Dataset, arm: int, train_indices, learner: Optional[LearnerSpec] = None, seed: int = 0
) -> ComponentFit:
    """Two-model propensity p̂(x)·π̂(j, x).

    p̂ is an offset ℓ1 logistic fit of R on X; π̂(1, x) a plain ℓ1
    logistic fit of T on X over labeled rows, with π̂(0, x) = 1 - π̂(1, x).

    Raises:
        DataError: If R, or T among labeled rows, is constant on the slice.
    """
    learner = learner or LearnerSpec()
    train = np.asarray(train_indices, dtype=np.intp)
    labels = dataset.outcome_label[train]
    label_fit, lam_r, offset = _fit_offset_logistic(
        dataset.covariates[train], labels, learner, child_seed(seed, 0), "labeling propensity"
    )
    rows = train[labels == 1]
    treat_fit, lam_t = _fit_treatment_ps(
        dataset.covariates[rows], dataset.treatment[rows], learner, child_seed(seed, 1)
    )
    fit = ComponentFit(
        ProductPredictor(
            LogisticPredictor(label_fit.coefficients, offset),
            LogisticPredictor(treat_fit.coefficients, complement=arm == 0),
        )
    )
    fit.absorb(label_fit, "beta_label", lam_r)
    fit.absorb(treat_fit, "beta_treatment", lam_t)
    return fit


def fit_ps_treatment_label(
    dataset: Dataset, arm: int, train_indices, learner: Optional[LearnerSpec] = None, seed: int = 0
) -> ComponentFit:
    """Propensity γ̂_Y(x)·γ̂_T(j, x) for data whose treatments may be missing.

    γ̂_Y is an offset logistic fit of the response indicator R_Y; γ̂_T(j, x)
    an offset logistic fit of 1{T = j}·R_T over rows with R_Y = 1. A slice
    where every response is observed gets γ̂_Y ≡ 1.
    """
    learner = learner or LearnerSpec()
    train = np.asarray(train_indices, dtype=np.intp)
    X = dataset.covariates
    response = dataset.label_response[train]
    fit = ComponentFit(ConstantPredictor(1.0))
    if response.min() == 1:
        response_pred: Callable[[np.ndarray], np.ndarray] = ConstantPredictor(1.0)
    else:
        resp_fit, lam_y, offset_y = _fit_offset_logistic(
            X[train], response, learner, child_seed(seed, 0), "response propensity"
        )
        response_pred = LogisticPredictor(resp_fit.coefficients, offset_y)
        fit.absorb(resp_fit, "beta_response", lam_y)
    rows = train[response == 1]
    treated = dataset.arm_indicator(arm)[rows]
    if dataset.treatment_label is not None:
        treated = treated * dataset.treatment_label[rows]
    treat_fit, lam_t, offset_t = _fit_offset_logistic(
        X[rows], treated, learner, child_seed(seed, 1), f"treatment-label propensity of arm {arm}"
    )
    fit.absorb(treat_fit, "beta_treatment", lam_t)
    fit.predictor = ProductPredictor(response_pred, LogisticPredictor(treat_fit.coefficients, offset_t))
    return fit


def fit_ps_constant_mcar(
    dataset: Dataset, arm: int, train_indices, learner: Optional[LearnerSpec] = None, seed: int = 0
) -> ComponentFit:
    """Labeling treated as MCAR: (mean of R on the slice)·π̂(j, x).

    Raises:
        DataError: If no row is labeled or T is constant on the slice.
    """
    learner = learner or LearnerSpec()
    train = np.asarray(train_indices, dtype=np.intp)
    rate = float(dataset.outcome_label[train].mean())
    if rate == 0.0:
        raise DataError("no labeled rows on the training slice")
    rows = train[dataset.treatment_known[train]]
    treat_fit, lam_t = _fit_treatment_ps(
        dataset.covariates[rows], dataset.treatment[rows], learner, seed
    )
    fit = ComponentFit(
        ProductPredictor(
            ConstantPredictor(rate),
            LogisticPredictor(treat_fit.coefficients, complement=arm == 0),
        )
    )
    fit.absorb(treat_fit, "beta_treatment", lam_t)
    return fit


def _require_oracle(oracle: Optional[TruthOracle]) -> TruthOracle:
    if oracle is None:
        raise ValidationError("oracle nuisances need a truth oracle; only simulated data have one")
    return oracle


def _or_oracle(dataset, arm, train, learner, seed, oracle) -> ComponentFit:
    return ComponentFit(partial(_require_oracle(oracle).m, arm))


def _ps_oracle(dataset, arm, train, learner, seed, oracle) -> ComponentFit:
    return ComponentFit(partial(_require_oracle(oracle).gamma, arm))


def _or_zero(dataset, arm, train, learner, seed, oracle) -> ComponentFit:
    return ComponentFit(ConstantPredictor(0.0))


def _drop_oracle(fitter):
    def fit(dataset, arm, train, learner, seed, oracle):
        return fitter(dataset, arm, train, learner, seed)

    return fit


OR_LEARNERS = {
    OutcomeMethod.LASSO_LINEAR: _drop_oracle(fit_or_lasso),
    OutcomeMethod.ORACLE: _or_oracle,
    OutcomeMethod.ZERO: _or_zero,
}

PS_LEARNERS = {
    PropensityMethod.OFFSET_LOGISTIC_DIRECT: _drop_oracle(fit_ps_offset_logistic),
    PropensityMethod.PRODUCT_TWO_LOGISTIC: _drop_oracle(fit_ps_product),
    PropensityMethod.PRODUCT_TREATMENT_LABEL: _drop_oracle(fit_ps_treatment_label),
    PropensityMethod.CONSTANT_MCAR: _drop_oracle(fit_ps_constant_mcar),
    PropensityMethod.ORACLE: _ps_oracle,
}


def get_learner(kind: str, name: str):
    """Look up an outcome ("or") or propensity ("ps") learner by name.

    Raises:
        ValidationError: If the name is not registered.
    """
    registry = OR_LEARNERS if kind == "or" else PS_LEARNERS
    for method, fitter in registry.items():
        if method.value == name:
            return fitter
    valid = ", ".join(m.value for m in registry)
    raise ValidationError(f"Unknown {kind} learner: {name}. Valid: {valid}")


def fit_nuisance(
    dataset: Dataset,
    arm: int,
    train_indices,
    learner: LearnerSpec,
    seed: int = 0,
    oracle: Optional[TruthOracle] = None,
    ps_floor: Optional[float] = None,
) -> NuisanceEstimate:
    """Fit the (outcome, propensity) pair for ``arm`` on a training slice.

    Args:
        dataset: Full sample.
        arm: Treatment arm.
        train_indices: Rows the learners may see.
        learner: Learner configuration.
        seed: Seed for the CV splits inside the fits.
        oracle: Truth oracle, required by oracle learners.
        ps_floor: Propensity clipping floor; 1/(2N) by default.

    Returns:
        NuisanceEstimate: The evaluable pair.
    """
    floor = propensity_floor(dataset.n) if ps_floor is None else ps_floor
    or_fit = get_learner("or", learner.or_method.value)(
        dataset, arm, train_indices, learner, child_seed(seed, 0), oracle
    )
    ps_fit = get_learner("ps", learner.ps_method.value)(
        dataset, arm, train_indices, learner, child_seed(seed, 1), oracle
    )
    lambdas = {f"or_{k}": v for k, v in or_fit.lambda_used.items()}
    lambdas.update({f"ps_{k}": v for k, v in ps_fit.lambda_used.items()})
    return NuisanceEstimate(
        arm=arm,
        or_fn=or_fit.predictor,
        ps_fn=ps_fit.predictor,
        method_tag=learner.tag,
        coefficients={**or_fit.coefficients, **ps_fit.coefficients},
        lambda_used=lambdas,
        ps_floor=floor,
        converged=or_fit.converged and ps_fit.converged,
        degraded=or_fit.degraded or ps_fit.degraded,
    )
