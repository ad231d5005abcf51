"""
Pydantic models for SKDMAR datasets, nuisance fits, estimates and reports.

Array-valued fields are stored as read-only numpy copies so that an
estimator can never mutate the data it was handed.
"""

from __future__ import annotations

from collections.abc import Callable
from enum import Enum
from typing import Any, NamedTuple, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from rich.table import Table

from .errors import ContractViolation, DataError, NumericalError

_ARRAYS = ConfigDict(arbitrary_types_allowed=True, frozen=True)


def _readonly(value: Any, dtype: Any = float) -> np.ndarray:
    arr = np.array(value, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _binary(value: Any, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 1:
        raise DataError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise DataError(f"{name} must contain only 0/1 values")
    return _readonly(arr, np.int8)


class Dataset(BaseModel):
    """An i.i.d. sample of (R, T, Y, X) with outcomes missing where R = 0.

    Args:
        covariates: N x d design matrix; column 0 is the intercept.
        outcome_label: R_i, or the product R_T·R_Y when treatments can
            also be missing.
        treatment_label: Optional R_T,i; treatment values are unknown
            where it is 0.
        response_label: Optional raw outcome indicator R_Y,i kept
            alongside the product label.
        treatment: T_i in {0, 1}; NaN where the treatment is unobserved.
        outcome_values: Y_i where labeled, NaN elsewhere.
    """

    model_config = _ARRAYS

    covariates: np.ndarray
    outcome_label: np.ndarray
    treatment_label: Optional[np.ndarray] = None
    response_label: Optional[np.ndarray] = None
    treatment: np.ndarray
    outcome_values: np.ndarray

    @field_validator("covariates", mode="before")
    @classmethod
    def _check_covariates(cls, value: Any) -> np.ndarray:
        x = _readonly(value)
        if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
            raise DataError(f"covariates must be a non-empty N x d matrix, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("covariates contain non-finite values")
        return x

    @field_validator("outcome_label", mode="before")
    @classmethod
    def _check_outcome_label(cls, value: Any) -> np.ndarray:
        return _binary(value, "outcome_label")

    @field_validator("treatment_label", "response_label", mode="before")
    @classmethod
    def _check_optional_label(cls, value: Any, info) -> Optional[np.ndarray]:
        if value is None:
            return None
        return _binary(value, info.field_name)

    @field_validator("treatment", mode="before")
    @classmethod
    def _check_treatment(cls, value: Any, info) -> np.ndarray:
        t = np.array(value, dtype=float, copy=True)
        if t.ndim != 1:
            raise DataError("treatment must be a 1-D vector")
        known = info.data.get("treatment_label")
        if known is not None and known.shape == t.shape:
            t[known == 0] = np.nan
            observed = t[known == 1]
        else:
            observed = t
        if not np.all((observed == 0.0) | (observed == 1.0)):
            raise DataError("treatment must be 0/1 wherever it is observed")
        t.setflags(write=False)
        return t

    @field_validator("outcome_values", mode="before")
    @classmethod
    def _mask_unlabeled(cls, value: Any, info) -> np.ndarray:
        y = np.array(value, dtype=float, copy=True)
        if y.ndim != 1:
            raise DataError("outcome_values must be a 1-D vector")
        labels = info.data.get("outcome_label")
        if labels is not None and labels.shape == y.shape:
            # Unlabeled cells are never read; keep them as the missing marker.
            y[labels == 0] = np.nan
        y.setflags(write=False)
        return y

    @model_validator(mode="after")
    def _check_consistency(self) -> Dataset:
        n = self.covariates.shape[0]
        vectors = {
            "outcome_label": self.outcome_label,
            "treatment": self.treatment,
            "outcome_values": self.outcome_values,
            "treatment_label": self.treatment_label,
            "response_label": self.response_label,
        }
        for name, vec in vectors.items():
            if vec is not None and vec.shape != (n,):
                raise DataError(f"{name} has length {vec.shape[0]}, expected {n}")
        labeled = self.outcome_label == 1
        if not np.all(np.isfinite(self.outcome_values[labeled])):
            raise DataError("labeled rows must carry a finite outcome")
        if self.treatment_label is not None and np.any(
            labeled & (self.treatment_label == 0)
        ):
            raise DataError("outcome_label must be 0 where the treatment is missing")
        if self.response_label is not None and np.any(
            labeled & (self.response_label == 0)
        ):
            raise DataError("outcome_label must be 0 where response_label is 0")
        return self

    @property
    def n(self) -> int:
        return int(self.covariates.shape[0])

    @property
    def d(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def treatment_known(self) -> np.ndarray:
        if self.treatment_label is None:
            return np.ones(self.n, dtype=bool)
        return self.treatment_label == 1

    @property
    def label_response(self) -> np.ndarray:
        """R_Y when it was recorded separately, else the outcome label."""
        if self.response_label is not None:
            return self.response_label
        return self.outcome_label

    def arm_indicator(self, arm: int) -> np.ndarray:
        """1{T_i = arm} with unknown treatments counted as 0."""
        t = np.where(self.treatment_known, self.treatment, -1.0)
        return (t == float(arm)).astype(np.int8)

    def outcome_at(self, indices: Any) -> np.ndarray:
        """Read outcomes at ``indices``.

        Raises:
            ContractViolation: If any requested row is unlabeled.
        """
        idx = np.asarray(indices, dtype=np.intp)
        if np.any(self.outcome_label[idx] == 0):
            raise ContractViolation("attempted to read an unlabeled outcome")
        return self.outcome_values[idx].copy()

    def masked_outcome(self, mask: Any) -> np.ndarray:
        """Length-N vector holding Y where ``mask`` is set and 0 elsewhere.

        Raises:
            ContractViolation: If ``mask`` selects an unlabeled row.
        """
        sel = np.asarray(mask).astype(bool)
        if np.any(sel & (self.outcome_label == 0)):
            raise ContractViolation("attempted to read an unlabeled outcome")
        return np.where(sel, np.nan_to_num(self.outcome_values), 0.0)

    def subset(self, indices: Any) -> Dataset:
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            covariates=self.covariates[idx],
            outcome_label=self.outcome_label[idx],
            treatment_label=None if self.treatment_label is None else self.treatment_label[idx],
            response_label=None if self.response_label is None else self.response_label[idx],
            treatment=self.treatment[idx],
            outcome_values=self.outcome_values[idx],
        )

    def replace(self, **updates: Any) -> Dataset:
        """Copy with some fields swapped out, re-running validation."""
        fields = {
            "covariates": self.covariates,
            "outcome_label": self.outcome_label,
            "treatment_label": self.treatment_label,
            "response_label": self.response_label,
            "treatment": self.treatment,
            "outcome_values": self.outcome_values,
        }
        fields.update(updates)
        return Dataset(**fields)


class ProductIndicator(BaseModel):
    """Γ^{(j)}_i = 1{T_i = j}·R_i, one entry per sample."""

    model_config = _ARRAYS

    arm: int = Field(ge=0, le=1)
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _check_values(cls, value: Any) -> np.ndarray:
        return _binary(value, "product indicator")

    @property
    def rate(self) -> float:
        return float(np.mean(self.values))


class NuisanceEvaluation(NamedTuple):
    or_values: np.ndarray
    ps_values: np.ndarray
    n_clipped: int


class NuisanceEstimate(BaseModel):
    """A fitted (outcome regression, product propensity) pair for one arm.

    Args:
        arm: Treatment arm the pair belongs to.
        or_fn: Maps an n x d matrix to m̂(arm, x) predictions.
        ps_fn: Maps an n x d matrix to raw γ̂(arm, x) predictions.
        method_tag: "<or_method>+<ps_method>".
        coefficients: Named coefficient vectors of the underlying fits.
        lambda_used: Penalty levels chosen for each fit.
        ps_floor: Lower clipping bound applied by ``evaluate``.
        converged: Whether every underlying solver met its tolerance.
        degraded: Whether a converged solve needed exponent clamping.
    """

    model_config = _ARRAYS

    arm: int = Field(ge=0, le=1)
    or_fn: Callable[[np.ndarray], np.ndarray]
    ps_fn: Callable[[np.ndarray], np.ndarray]
    method_tag: str
    coefficients: dict[str, np.ndarray] = Field(default_factory=dict)
    lambda_used: dict[str, float] = Field(default_factory=dict)
    ps_floor: float = Field(gt=0.0, le=0.5)
    converged: bool = True
    degraded: bool = False

    def evaluate(self, covariates: np.ndarray) -> NuisanceEvaluation:
        """Evaluate both nuisances, clipping the propensity into [ps_floor, 1].

        Raises:
            NumericalError: If either nuisance returns a non-finite value.
        """
        m = np.asarray(self.or_fn(covariates), dtype=float)
        g = np.asarray(self.ps_fn(covariates), dtype=float)
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(g))):
            raise NumericalError(f"non-finite nuisance values from {self.method_tag}")
        n_clipped = int(np.count_nonzero((g < self.ps_floor) | (g > 1.0)))
        return NuisanceEvaluation(m, np.clip(g, self.ps_floor, 1.0), n_clipped)


class FoldAssignment(BaseModel):
    """Partition of {0..N-1} into K folds labeled 1..K with sizes within one."""

    model_config = _ARRAYS

    n: int = Field(ge=1)
    k_folds: int = Field(ge=2)
    assignment: np.ndarray
    seed: Optional[int] = None

    @field_validator("assignment", mode="before")
    @classmethod
    def _as_ints(cls, value: Any) -> np.ndarray:
        return _readonly(value, np.int64)

    @model_validator(mode="after")
    def _check_partition(self) -> FoldAssignment:
        if self.assignment.shape != (self.n,):
            raise DataError("fold assignment length does not match n")
        sizes = self.sizes()
        if sizes.min() < 1 or np.any((self.assignment < 1) | (self.assignment > self.k_folds)):
            raise DataError("every fold must be non-empty and labeled 1..K")
        if sizes.max() - sizes.min() > 1:
            raise DataError("fold sizes must differ by at most one")
        return self

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k_folds + 1)[1:]

    def fold(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)


class ArmEstimate(BaseModel):
    """Counterfactual-mean estimate θ̂_j with its influence values.

    ``plugin_terms`` are the per-sample terms whose mean or variance
    defines the estimate; ``influence`` is their centered version.
    ``or_values``/``ps_values`` keep the cross-fitted nuisance
    evaluations each sample was scored with.
    """

    model_config = _ARRAYS

    arm: int = Field(ge=0, le=1)
    theta_hat: float
    influence: np.ndarray
    sigma_hat: float = Field(ge=0.0)
    plugin_terms: np.ndarray
    or_values: np.ndarray
    ps_values: np.ndarray
    clip_count: int = 0
    converged: bool = True
    degraded: bool = False
    fits: list[NuisanceEstimate] = Field(default_factory=list)

    @field_validator("influence", "plugin_terms", "or_values", "ps_values", mode="before")
    @classmethod
    def _as_array(cls, value: Any) -> np.ndarray:
        return _readonly(value)

    @model_validator(mode="after")
    def _check_centered(self) -> ArmEstimate:
        scale = 1.0 + abs(self.theta_hat) + float(np.max(np.abs(self.influence), initial=0.0))
        if abs(float(np.mean(self.influence))) > 1e-9 * scale:
            raise NumericalError("influence values are not centered")
        if not np.isfinite(self.theta_hat) or not np.isfinite(self.sigma_hat):
            raise NumericalError(f"non-finite estimate for arm {self.arm}")
        return self


class OverlapDiagnostics(BaseModel):
    """Labeling and overlap summaries for a report.

    Args:
        gamma_bar: Γ̄_N for arms (0, 1).
        a_hat: Effective overlap â_{N,j} for arms (0, 1).
        effective_sample_size: N · min_j â_{N,j}.
        ps_floor: Propensity clipping floor used.
        clip_count: Number of clipped propensity evaluations.
        solver_degraded: Whether any converged solve needed clamping.
        solver_converged: Whether every solve met its tolerance.
    """

    gamma_bar: tuple[float, float]
    a_hat: tuple[float, float]
    effective_sample_size: float
    ps_floor: float
    clip_count: int = 0
    solver_degraded: bool = False
    solver_converged: bool = True


class AteReport(BaseModel):
    """ATE estimate with plug-in variance and Wald confidence interval."""

    model_config = _ARRAYS

    method: str
    n: int = Field(ge=1)
    mu_hat: float
    sigma_hat: float = Field(ge=0.0)
    ci_level: float = Field(gt=0.0, lt=1.0)
    ci: tuple[float, float]
    arms: tuple[ArmEstimate, ArmEstimate]
    influence: np.ndarray
    diagnostics: OverlapDiagnostics
    n_repeats: int = Field(default=1, ge=1)

    @field_validator("influence", mode="before")
    @classmethod
    def _as_array(cls, value: Any) -> np.ndarray:
        return _readonly(value)

    @model_validator(mode="after")
    def _check_interval(self) -> AteReport:
        lo, hi = self.ci
        if not (np.isfinite(self.mu_hat) and np.isfinite(self.sigma_hat)):
            raise NumericalError("non-finite ATE estimate")
        if not lo <= self.mu_hat <= hi:
            raise NumericalError("confidence interval does not contain the estimate")
        if self.arms[0].arm != 0 or self.arms[1].arm != 1:
            raise DataError("arms must be ordered (arm 0, arm 1)")
        return self

    @property
    def se(self) -> float:
        return float(np.sqrt(self.sigma_hat / self.n))

    def to_records(self) -> list[tuple[str, Any]]:
        """Key/value pairs for the single-row report written by the CLI."""
        diag = self.diagnostics
        return [
            ("mu_hat", self.mu_hat),
            ("se", self.se),
            ("ci_lo", self.ci[0]),
            ("ci_hi", self.ci[1]),
            ("ci_level", self.ci_level),
            ("theta_1", self.arms[1].theta_hat),
            ("theta_0", self.arms[0].theta_hat),
            ("sigma_1", self.arms[1].sigma_hat),
            ("sigma_0", self.arms[0].sigma_hat),
            ("gamma_bar_1", diag.gamma_bar[1]),
            ("gamma_bar_0", diag.gamma_bar[0]),
            ("a_hat_1", diag.a_hat[1]),
            ("a_hat_0", diag.a_hat[0]),
            ("effective_sample_size", diag.effective_sample_size),
            ("clip_count", diag.clip_count),
            ("solver_degraded", diag.solver_degraded),
            ("n", self.n),
            ("method", self.method),
        ]


class SolverConfig(BaseModel):
    """Stopping rule and step control shared by all penalized solvers.

    Args:
        tol: KKT residual threshold for convergence.
        max_iter: Iteration (or coordinate sweep) cap.
        step_shrink: Backtracking factor applied to the proximal step.
        init: Optional warm start; zeros when omitted.
        record_trace: Keep the objective value after every iteration.
    """

    model_config = _ARRAYS

    tol: float = Field(default=1e-7, gt=0.0)
    max_iter: int = Field(default=10_000, ge=1)
    step_shrink: float = Field(default=0.5, gt=0.0, lt=1.0)
    init: Optional[np.ndarray] = None
    record_trace: bool = False


class SolverResult(BaseModel):
    """Outcome of one penalized solve."""

    model_config = _ARRAYS

    coefficients: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    tol: float
    clamp_count: int = 0
    trace: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_certificate(self) -> SolverResult:
        if self.converged and not self.kkt_residual <= self.tol:
            raise NumericalError("converged result must satisfy the KKT tolerance")
        return self

    @property
    def degraded(self) -> bool:
        return self.converged and self.clamp_count > 0


class OutcomeMethod(str, Enum):
    """Outcome-regression learners."""

    LASSO_LINEAR = "lasso_linear"
    ORACLE = "oracle"
    ZERO = "zero"


class PropensityMethod(str, Enum):
    """Product-propensity learners."""

    OFFSET_LOGISTIC_DIRECT = "offset_logistic_direct"
    PRODUCT_TWO_LOGISTIC = "product_two_logistic"
    PRODUCT_TREATMENT_LABEL = "product_treatment_label"
    CONSTANT_MCAR = "constant_mcar"
    ORACLE = "oracle"


class LambdaMode(str, Enum):
    CV = "cv"
    FIXED = "fixed"


class LambdaPolicy(BaseModel):
    """How penalty levels are chosen: K-fold CV or fixed values."""

    model_config = ConfigDict(frozen=True)

    mode: LambdaMode = LambdaMode.CV
    lambda_or: Optional[float] = Field(default=None, ge=0.0)
    lambda_ps: Optional[float] = Field(default=None, ge=0.0)

    @model_validator(mode="after")
    def _check_fixed(self) -> LambdaPolicy:
        if self.mode == LambdaMode.FIXED and (self.lambda_or is None or self.lambda_ps is None):
            raise ValueError("fixed lambda policy needs both lambda_or and lambda_ps")
        return self

    @classmethod
    def fixed(cls, lambda_or: float, lambda_ps: float) -> LambdaPolicy:
        return cls(mode=LambdaMode.FIXED, lambda_or=lambda_or, lambda_ps=lambda_ps)


class LearnerSpec(BaseModel):
    """Nuisance learner configuration for one estimator.

    Args:
        or_method: Outcome-regression learner.
        ps_method: Product-propensity learner.
        lambda_policy: Penalty selection rule.
        cv_folds: Folds used when the policy is CV.
        n_lambda: Size of the geometric λ grid.
        lambda_min_ratio: Smallest grid value as a fraction of λ_max.
        solver: Solver stopping rule.
    """

    model_config = ConfigDict(frozen=True)

    or_method: OutcomeMethod = OutcomeMethod.LASSO_LINEAR
    ps_method: PropensityMethod = PropensityMethod.OFFSET_LOGISTIC_DIRECT
    lambda_policy: LambdaPolicy = Field(default_factory=LambdaPolicy)
    cv_folds: int = Field(default=5, ge=2)
    n_lambda: int = Field(default=50, ge=1)
    lambda_min_ratio: float = Field(default=1e-3, gt=0.0, le=1.0)
    solver: SolverConfig = Field(default_factory=SolverConfig)

    @property
    def tag(self) -> str:
        return f"{self.or_method.value}+{self.ps_method.value}"


class DgpName(str, Enum):
    """Simulation designs: (a)-(c) decaying labels, (d)-(e) fully labeled."""

    A = "a"
    B = "b"
    C = "c"
    D = "d"
    E = "e"

    @property
    def supervised(self) -> bool:
        return self in (DgpName.D, DgpName.E)

    @property
    def quadratic(self) -> bool:
        return self in (DgpName.C, DgpName.E)


class DgpSpec(BaseModel):
    """One simulation design.

    Args:
        dgp: Design name.
        n: Sample size N.
        d: Covariate dimension including the intercept.
        s_alpha: Outcome-model sparsity.
        s_beta: Propensity-model sparsity.
        gamma_target: Expected labeled-and-armed rate (γ_{N,1}, γ_{N,0});
            required for (a)-(c), ignored for (d)-(e).
        seed: Base seed of the design.
    """

    model_config = ConfigDict(frozen=True)

    dgp: DgpName
    n: int = Field(ge=2)
    d: int = Field(ge=3)
    s_alpha: int = Field(default=3, ge=2)
    s_beta: int = Field(default=3, ge=2)
    gamma_target: Optional[tuple[float, float]] = None
    seed: int = 0

    @model_validator(mode="before")
    @classmethod
    def _normalize_gamma(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        if str(getattr(data.get("dgp"), "value", data.get("dgp"))) in ("d", "e"):
            # Fully labeled designs have no labeling rate to calibrate.
            data["gamma_target"] = None
        elif isinstance(data.get("gamma_target"), (int, float)):
            data["gamma_target"] = (float(data["gamma_target"]),) * 2
        return data

    @model_validator(mode="after")
    def _check_design(self) -> DgpSpec:
        if self.s_alpha > self.d - 1 or self.s_beta > self.d - 1:
            raise ValueError(f"s_alpha and s_beta must be at most d - 1 = {self.d - 1}")
        if self.dgp.supervised:
            return self
        if self.gamma_target is None:
            raise ValueError(f"DGP ({self.dgp.value}) needs a gamma target")
        if not all(0.0 < g <= 0.5 for g in self.gamma_target):
            raise ValueError("gamma targets must lie in (0, 0.5]")
        return self

    def header(self) -> str:
        """Table caption such as 'DGP (a) N=10000, d=51, s_alpha=3, ...'."""
        text = (
            f"DGP ({self.dgp.value}) N={self.n}, d={self.d}, "
            f"s_alpha={self.s_alpha}, s_beta={self.s_beta}"
        )
        if self.gamma_target is None:
            return text
        g1, g0 = self.gamma_target
        if g1 == g0:
            return f"{text}, gamma={g1:g} (N*gamma={self.n * g1:g})"
        return f"{text}, gamma1={g1:g}, gamma0={g0:g}"


class EstimatorMetrics(BaseModel):
    """Robust summary of one estimator over a replication study."""

    estimator: str
    bias: float
    rmse: float
    length: float
    coverage: float
    esd: float
    asd: float
    n_ok: int
    n_fail: int


class MetricsTable(BaseModel):
    """Per-estimator metrics for a simulation study."""

    header: str
    mu0: float
    n_reps: int
    rows: list[EstimatorMetrics]
    valid: bool = True

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([row.model_dump() for row in self.rows])
        columns = ["estimator", "bias", "rmse", "length", "coverage", "esd", "asd", "n_fail"]
        return frame[columns]

    def render(self, box=None) -> Table:
        """Rich table in the layout of a simulation results table."""
        kwargs = {} if box is None else {"box": box}
        table = Table(title=self.header, **kwargs)
        table.add_column("Estimator", style="cyan")
        for name in ("Bias", "RMSE", "Length", "Coverage", "ESD", "ASD"):
            table.add_column(name, justify="right")
        table.add_column("Fail", justify="right", style="red")
        for row in self.rows:
            table.add_row(
                row.estimator,
                *(f"{v:.6g}" for v in (row.bias, row.rmse, row.length, row.coverage, row.esd, row.asd)),
                str(row.n_fail),
            )
        return table


class StudyConfig(BaseModel):
    """Settings of a Monte Carlo replication study.

    Args:
        estimators: Estimator names to compare.
        n_reps: Number of replications.
        base_seed: Replication r draws its data from seed base_seed + r.
        workers: Parallel worker processes.
        k_folds: Cross-fitting folds of the cross-fitted estimators.
        n_repeats: Cross-fitting repeats averaged per estimate.
        ci_level: Nominal confidence level.
        tuning: Penalty and solver settings shared by every learner.
        max_fail_rate: Largest failure share for the table to stay valid.
    """

    model_config = ConfigDict(frozen=True)

    estimators: tuple[str, ...] = ("oracle", "mcar", "ss-lasso", "brss")
    n_reps: int = Field(default=200, ge=1)
    base_seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)
    k_folds: int = Field(default=2, ge=2)
    n_repeats: int = Field(default=1, ge=1)
    ci_level: float = Field(default=0.95, gt=0.0, lt=1.0)
    tuning: LearnerSpec = Field(default_factory=LearnerSpec)
    max_fail_rate: float = Field(default=0.02, gt=0.0, le=1.0)
