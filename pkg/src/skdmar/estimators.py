"""
ATE estimators for decaying-MAR labeled data.

``dr_dmar_*`` is the cross-fitted doubly robust estimator with pluggable
nuisance learners; ``brss_*`` is the single-split estimator with
covariate-balancing propensity and weighted Lasso outcome fits.
Both report plug-in variances and Wald intervals.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .core import (
    build_product_indicator,
    child_seed,
    effective_overlap,
    make_folds,
    propensity_floor,
)
from .errors import DataError, NumericalError, ValidationError
from .models import (
    ArmEstimate,
    AteReport,
    Dataset,
    FoldAssignment,
    LearnerSpec,
    NuisanceEstimate,
    OutcomeMethod,
    OverlapDiagnostics,
    PropensityMethod,
)
from .nuisance import LinearPredictor, LogisticPredictor, fit_nuisance, solve_penalized
from .solvers import PenalizedProblem

if TYPE_CHECKING:
    from .simulate import TruthOracle

logger = logging.getLogger("skdmar.estimators")

# Estimator name -> (outcome learner, propensity learner); "brss" is separate.
METHODS = {
    "oracle": (OutcomeMethod.ORACLE, PropensityMethod.ORACLE),
    "mcar": (OutcomeMethod.LASSO_LINEAR, PropensityMethod.CONSTANT_MCAR),
    "ss-lasso": (OutcomeMethod.LASSO_LINEAR, PropensityMethod.OFFSET_LOGISTIC_DIRECT),
    "ss-lasso-product": (OutcomeMethod.LASSO_LINEAR, PropensityMethod.PRODUCT_TWO_LOGISTIC),
    "ss-lasso-treatment-label": (
        OutcomeMethod.LASSO_LINEAR,
        PropensityMethod.PRODUCT_TREATMENT_LABEL,
    ),
    "ipw": (OutcomeMethod.ZERO, PropensityMethod.OFFSET_LOGISTIC_DIRECT),
}

ESTIMATOR_NAMES = (*METHODS, "brss")


def ci_from(estimate: float, sigma_hat: float, n: int, level: float) -> tuple[float, float]:
    """Wald interval estimate ± z_{(1+level)/2}·sqrt(sigma_hat / n).

    Raises:
        ValidationError: If ``level`` is outside (0, 1), ``n < 1`` or
            ``sigma_hat`` is negative.
    """
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")
    if n < 1:
        raise ValidationError(f"sample size must be positive, got {n}")
    if not sigma_hat >= 0.0:
        raise ValidationError(f"variance must be non-negative, got {sigma_hat}")
    half_width = norm.ppf(0.5 + level / 2.0) * np.sqrt(sigma_hat / n)
    return (estimate - half_width, estimate + half_width)


def aipw_terms(
    or_values: np.ndarray, ps_values: np.ndarray, gamma: np.ndarray, outcome: np.ndarray
) -> np.ndarray:
    """Per-sample terms m̃ + Γ/γ̃·(Y - m̃); ``outcome`` is only read where Γ = 1."""
    y = np.where(gamma == 1, outcome, 0.0)
    return or_values + gamma / ps_values * (y - or_values)


def learner_for(method: str, tuning: Optional[LearnerSpec] = None) -> LearnerSpec:
    """LearnerSpec of a named cross-fitted estimator with shared tuning.

    Raises:
        ValidationError: If ``method`` is not a cross-fitted estimator.
    """
    if method not in METHODS:
        raise ValidationError(f"Unknown method: {method}. Valid: {', '.join(ESTIMATOR_NAMES)}")
    or_method, ps_method = METHODS[method]
    tuning = tuning or LearnerSpec()
    return tuning.model_copy(update={"or_method": or_method, "ps_method": ps_method})


def dr_dmar_arm(
    dataset: Dataset,
    arm: int,
    folds: FoldAssignment,
    learner: LearnerSpec,
    seed: int = 0,
    oracle: Optional[TruthOracle] = None,
) -> ArmEstimate:
    """Cross-fitted doubly robust estimate of θ_arm = E[Y(arm)].

    Nuisances scoring fold k are fitted on the complement of fold k only.

    Raises:
        DataError: If some fold complement has no labeled row in ``arm``.
    """
    if folds.n != dataset.n:
        raise ValidationError("fold assignment does not match the dataset size")
    gamma = build_product_indicator(dataset, arm).values
    for k in range(1, folds.k_folds + 1):
        if not gamma[folds.complement(k)].any():
            raise DataError(
                f"empty-arm fold: the complement of fold {k} has no labeled rows "
                f"in arm {arm}; use fewer folds"
            )

    X = dataset.covariates
    floor = propensity_floor(dataset.n)
    or_values = np.empty(dataset.n)
    ps_values = np.empty(dataset.n)
    clips = 0
    fits: list[NuisanceEstimate] = []
    for k in range(1, folds.k_folds + 1):
        nuisance = fit_nuisance(
            dataset, arm, folds.complement(k), learner, child_seed(seed, arm, k), oracle, floor
        )
        idx = folds.fold(k)
        evaluation = nuisance.evaluate(X[idx])
        or_values[idx] = evaluation.or_values
        ps_values[idx] = evaluation.ps_values
        clips += evaluation.n_clipped
        fits.append(nuisance)

    y = dataset.masked_outcome(gamma == 1)
    terms = aipw_terms(or_values, ps_values, gamma, y)
    theta = float(terms.mean())
    influence = terms - theta
    if clips:
        logger.info("arm %d: %d propensity values clipped at %.3g", arm, clips, floor)
    return ArmEstimate(
        arm=arm,
        theta_hat=theta,
        influence=influence,
        sigma_hat=float(np.mean(influence**2)),
        plugin_terms=terms,
        or_values=or_values,
        ps_values=ps_values,
        clip_count=clips,
        converged=all(f.converged for f in fits),
        degraded=any(f.degraded for f in fits),
        fits=fits,
    )


def _average_arms(runs: list[ArmEstimate]) -> ArmEstimate:
    if len(runs) == 1:
        return runs[0]
    first = runs[0]
    return ArmEstimate(
        arm=first.arm,
        theta_hat=float(np.mean([r.theta_hat for r in runs])),
        influence=np.mean([r.influence for r in runs], axis=0),
        sigma_hat=float(np.mean([r.sigma_hat for r in runs])),
        plugin_terms=np.mean([r.plugin_terms for r in runs], axis=0),
        or_values=first.or_values,
        ps_values=first.ps_values,
        clip_count=sum(r.clip_count for r in runs),
        converged=all(r.converged for r in runs),
        degraded=any(r.degraded for r in runs),
        fits=first.fits,
    )


def _diagnostics(
    dataset: Dataset, runs: list[tuple[ArmEstimate, ArmEstimate]], floor: float
) -> OverlapDiagnostics:
    gamma_bar = tuple(build_product_indicator(dataset, arm).rate for arm in (0, 1))
    a_hat = tuple(
        float(np.mean([effective_overlap(run[arm].ps_values) for run in runs])) for arm in (0, 1)
    )
    arms = [a for run in runs for a in run]
    return OverlapDiagnostics(
        gamma_bar=gamma_bar,
        a_hat=a_hat,
        effective_sample_size=dataset.n * min(a_hat),
        ps_floor=floor,
        clip_count=sum(a.clip_count for a in arms),
        solver_degraded=any(a.degraded for a in arms),
        solver_converged=all(a.converged for a in arms),
    )


def _report(
    method: str,
    dataset: Dataset,
    runs: list[tuple[ArmEstimate, ArmEstimate]],
    variances: list[float],
    influence: np.ndarray,
    ci_level: float,
) -> AteReport:
    arm0 = _average_arms([run[0] for run in runs])
    arm1 = _average_arms([run[1] for run in runs])
    mu_hat = arm1.theta_hat - arm0.theta_hat
    sigma_hat = float(np.mean(variances))
    if not (np.isfinite(mu_hat) and np.isfinite(sigma_hat)):
        raise NumericalError(f"{method} produced a non-finite estimate")
    diagnostics = _diagnostics(dataset, runs, propensity_floor(dataset.n))
    if diagnostics.effective_sample_size < 10.0:
        logger.warning(
            "weak overlap: effective sample size %.1f of %d",
            diagnostics.effective_sample_size,
            dataset.n,
        )
    return AteReport(
        method=method,
        n=dataset.n,
        mu_hat=mu_hat,
        sigma_hat=sigma_hat,
        ci_level=ci_level,
        ci=ci_from(mu_hat, sigma_hat, dataset.n, ci_level),
        arms=(arm0, arm1),
        influence=influence,
        diagnostics=diagnostics,
        n_repeats=len(runs),
    )


def dr_dmar_ate(
    dataset: Dataset,
    k_folds: int = 2,
    learner: Optional[LearnerSpec] = None,
    seed: int = 0,
    n_repeats: int = 1,
    ci_level: float = 0.95,
    oracle: Optional[TruthOracle] = None,
    method: Optional[str] = None,
) -> AteReport:
    """Cross-fitted doubly robust ATE θ̂_1 - θ̂_0 with plug-in variance.

    With ``n_repeats > 1`` the estimate, arm variances and influence
    values are averaged over independent fold splits.

    Args:
        dataset: The sample.
        k_folds: Number of cross-fitting folds.
        learner: Nuisance learners; the ss-lasso pair by default.
        seed: Seed of the fold splits and CV splits.
        n_repeats: Independent cross-fitting repeats.
        ci_level: Confidence level of the Wald interval.
        oracle: Truth oracle for oracle learners.
        method: Name recorded in the report.

    Returns:
        AteReport: Estimate, variance, interval and diagnostics.
    """
    learner = learner or LearnerSpec()
    if not 0.0 < ci_level < 1.0:
        raise ValidationError(f"confidence level must lie in (0, 1), got {ci_level}")
    if n_repeats < 1:
        raise ValidationError(f"n_repeats must be at least 1, got {n_repeats}")
    runs: list[tuple[ArmEstimate, ArmEstimate]] = []
    variances = []
    influences = []
    for r in range(n_repeats):
        folds = make_folds(dataset.n, k_folds, child_seed(seed, r))
        arms = tuple(
            dr_dmar_arm(dataset, arm, folds, learner, child_seed(seed, r, 1), oracle)
            for arm in (0, 1)
        )
        combined = arms[1].influence - arms[0].influence
        runs.append(arms)
        variances.append(float(np.mean(combined**2)))
        influences.append(combined)
    logger.debug("%s: %d repeat(s) of %d-fold cross-fitting", learner.tag, n_repeats, k_folds)
    return _report(
        method or learner.tag, dataset, runs, variances, np.mean(influences, axis=0), ci_level
    )


def brss_arm(
    dataset: Dataset,
    arm: int,
    seed: int = 0,
    learner: Optional[LearnerSpec] = None,
    halves: Optional[FoldAssignment] = None,
) -> ArmEstimate:
    """Single-split balancing estimate of θ_arm.

    On each half k the propensity slope β̂^{(k)} solves the balancing
    problem and α̂^{(k)} the weighted Lasso. Half k is scored with
    α̂ from the other half and ĝ^{(k)}(x) = g(x'β̂^{(k)} + log γ̂^{(k)}) from
    its own; θ̂ is the average of the two half means. The variance is the
    plug-in second moment at the averaged coefficients.

    Args:
        dataset: The sample.
        arm: Treatment arm.
        seed: Seed of the split and of the CV splits.
        learner: Penalty policy, CV folds and solver settings.
        halves: Explicit two-fold split; drawn from ``seed`` when omitted.

    Raises:
        DataError: If Γ^{(arm)} is constant on either half.
    """
    learner = learner or LearnerSpec()
    halves = halves or make_folds(dataset.n, 2, seed)
    if halves.k_folds != 2 or halves.n != dataset.n:
        raise ValidationError("BRSS needs a two-fold split of the whole sample")
    X = dataset.covariates
    gamma = build_product_indicator(dataset, arm).values
    y = dataset.masked_outcome(gamma == 1)
    policy = learner.lambda_policy
    alphas, betas, gamma_hats, lambdas, results = {}, {}, {}, {}, []
    for k in (1, 2):
        idx = halves.fold(k)
        g_k = gamma[idx].astype(float)
        if g_k.min() == g_k.max():
            raise DataError(
                f"degenerate half {k} for arm {arm}: Γ is all {int(g_k[0])}; "
                "the balancing fit needs both labeled and unlabeled rows"
            )
        gamma_hat = float(g_k.mean())
        beta_problem = PenalizedProblem("tbr_beta", X[idx], g_k, gamma_hat=gamma_hat)
        beta_res, lam_beta = solve_penalized(
            beta_problem, policy.lambda_ps, learner, child_seed(seed, arm, k, 0), "balancing fit"
        )
        alpha_problem = PenalizedProblem(
            "tbr_alpha",
            X[idx],
            y[idx],
            gamma=g_k,
            gamma_hat=gamma_hat,
            beta_hat=beta_res.coefficients,
        )
        alpha_res, lam_alpha = solve_penalized(
            alpha_problem, policy.lambda_or, learner, child_seed(seed, arm, k, 1), "weighted Lasso"
        )
        alphas[k], betas[k], gamma_hats[k] = (
            alpha_res.coefficients,
            beta_res.coefficients,
            gamma_hat,
        )
        lambdas[k] = {"alpha": lam_alpha, "beta": lam_beta}
        results.extend([beta_res, alpha_res])

    floor = propensity_floor(dataset.n)
    or_values = np.empty(dataset.n)
    ps_values = np.empty(dataset.n)
    clips = 0
    fits: list[NuisanceEstimate] = []
    half_means = []
    for k in (1, 2):
        other = 3 - k
        nuisance = NuisanceEstimate(
            arm=arm,
            or_fn=LinearPredictor(alphas[other]),
            ps_fn=LogisticPredictor(betas[k], float(np.log(gamma_hats[k]))),
            method_tag="brss",
            coefficients={"alpha": alphas[other], "beta": betas[k]},
            lambda_used={"or_alpha": lambdas[other]["alpha"], "ps_beta": lambdas[k]["beta"]},
            ps_floor=floor,
            converged=all(r.converged for r in results),
            degraded=any(r.degraded for r in results),
        )
        idx = halves.fold(k)
        evaluation = nuisance.evaluate(X[idx])
        or_values[idx] = evaluation.or_values
        ps_values[idx] = evaluation.ps_values
        clips += evaluation.n_clipped
        fits.append(nuisance)
        terms = aipw_terms(evaluation.or_values, evaluation.ps_values, gamma[idx], y[idx])
        half_means.append(float(terms.mean()))
    theta = 0.5 * (half_means[0] + half_means[1])

    alpha_bar = 0.5 * (alphas[1] + alphas[2])
    beta_bar = 0.5 * (betas[1] + betas[2])
    gamma_bar = 0.5 * (gamma_hats[1] + gamma_hats[2])
    g_bar = np.clip(expit(X @ beta_bar + np.log(gamma_bar)), floor, 1.0)
    fitted = X @ alpha_bar
    plugin = aipw_terms(fitted, g_bar, gamma, y)
    sigma = float(np.mean((plugin - theta) ** 2))
    if not (np.isfinite(theta) and np.isfinite(sigma)):
        raise NumericalError(f"BRSS produced a non-finite estimate for arm {arm}")
    return ArmEstimate(
        arm=arm,
        theta_hat=theta,
        influence=plugin - plugin.mean(),
        sigma_hat=sigma,
        plugin_terms=plugin,
        or_values=or_values,
        ps_values=ps_values,
        clip_count=clips,
        converged=all(r.converged for r in results),
        degraded=any(r.degraded for r in results),
        fits=fits,
    )


def brss_ate(
    dataset: Dataset,
    seed: int = 0,
    learner: Optional[LearnerSpec] = None,
    ci_level: float = 0.95,
) -> AteReport:
    """BRSS ATE θ̂_1 - θ̂_0 from one random split shared by both arms."""
    if not 0.0 < ci_level < 1.0:
        raise ValidationError(f"confidence level must lie in (0, 1), got {ci_level}")
    halves = make_folds(dataset.n, 2, seed)
    arms = tuple(
        brss_arm(dataset, arm, child_seed(seed, 1), learner, halves) for arm in (0, 1)
    )
    mu_hat = arms[1].theta_hat - arms[0].theta_hat
    # Centered at the split estimate, so sigma_hat is the second moment of ``influence``.
    influence = arms[1].plugin_terms - arms[0].plugin_terms - mu_hat
    sigma = float(np.mean(influence**2))
    return _report("brss", dataset, [arms], [sigma], influence, ci_level)


def estimate_ate(
    method: str,
    dataset: Dataset,
    tuning: Optional[LearnerSpec] = None,
    k_folds: int = 2,
    seed: int = 0,
    n_repeats: int = 1,
    ci_level: float = 0.95,
    oracle: Optional[TruthOracle] = None,
) -> AteReport:
    """Run a named estimator.

    Args:
        method: One of ``ESTIMATOR_NAMES``.
        dataset: The sample.
        tuning: Penalty policy, CV and solver settings shared by all fits.
        k_folds: Cross-fitting folds (ignored by "brss").
        seed: Seed of every random split.
        n_repeats: Cross-fitting repeats (ignored by "brss").
        ci_level: Confidence level.
        oracle: Truth oracle, required by "oracle".

    Raises:
        ValidationError: If ``method`` is unknown.
    """
    if method == "brss":
        if n_repeats > 1:
            logger.warning("brss uses a single split; ignoring n_repeats=%d", n_repeats)
        return brss_ate(dataset, seed, tuning, ci_level)
    learner = learner_for(method, tuning)
    return dr_dmar_ate(dataset, k_folds, learner, seed, n_repeats, ci_level, oracle, method)
