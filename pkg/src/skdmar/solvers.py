"""
Penalized convex solvers used by the nuisance learners.

Four problems share one stopping rule, a KKT residual certificate:

- weighted least squares + λ‖α‖₁, solved by cyclic coordinate descent
  on the weighted Gram matrix;
- ℓ1 logistic regression with a fixed per-sample offset;
- the tailored balancing loss for the propensity slope β;
- the tailored weighted least squares for the outcome slope α.

The smooth parts are ``SmoothLoss`` objects; the last three run an
accelerated proximal gradient with backtracking and a monotone restart,
so the recorded objective never increases.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from .core import make_folds, stratified_assignment
from .errors import DataError, NumericalError, ValidationError
from .models import SolverConfig, SolverResult

logger = logging.getLogger("skdmar.solvers")

EXP_CLAMP = 40.0
MIN_CURVATURE = 1e-12


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def kkt_residual(gradient: np.ndarray, coefficients: np.ndarray, lam: float) -> float:
    """Largest violation of the ℓ1 subgradient optimality conditions.

    For a zero coordinate the violation is ``max(|g_j| - λ, 0)``; for a
    nonzero one it is ``|g_j + λ·sign(β_j)|``.
    """
    g = np.asarray(gradient, dtype=float)
    b = np.asarray(coefficients, dtype=float)
    violation = np.where(
        b == 0.0,
        np.maximum(np.abs(g) - lam, 0.0),
        np.abs(g + lam * np.sign(b)),
    )
    return float(violation.max(initial=0.0))


def clamped_exp_neg(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Convex surrogate of exp(-u) with the exponent clamped to ±EXP_CLAMP.

    Below the clamp the function continues along its tangent line; above
    it the function is flat. Returns ``(value, derivative, clamped_mask)``.
    """
    uc = np.clip(u, -EXP_CLAMP, EXP_CLAMP)
    base = np.exp(-uc)
    low = u < -EXP_CLAMP
    value = np.where(low, base * (1.0 - (u - uc)), base)
    slope = np.where(u > EXP_CLAMP, 0.0, -base)
    return value, slope, u != uc


class SmoothLoss(ABC):
    """Smooth part of a penalized objective, averaged over its rows."""

    @property
    @abstractmethod
    def dim(self) -> int:
        """Number of coefficients."""

    @abstractmethod
    def value(self, coef: np.ndarray) -> float:
        """Loss at ``coef``."""

    @abstractmethod
    def gradient(self, coef: np.ndarray) -> np.ndarray:
        """Gradient at ``coef``."""

    @abstractmethod
    def curvature(self, coef: np.ndarray) -> float:
        """Estimate of the local Lipschitz constant of the gradient."""

    def value_and_gradient(self, coef: np.ndarray) -> tuple[float, np.ndarray]:
        return self.value(coef), self.gradient(coef)

    def clamp_count(self, coef: np.ndarray) -> int:
        return 0


class LeastSquaresLoss(SmoothLoss):
    """(1/M) Σ w_i (y_i - x_i'α)², held as its weighted Gram matrix."""

    def __init__(self, X: np.ndarray, y: np.ndarray, weights: np.ndarray, clamps: int = 0):
        m = X.shape[0]
        keep = weights > 0
        Xw = X[keep] * weights[keep, None]
        self.gram = (Xw.T @ X[keep]) / m
        self.cross = (Xw.T @ y[keep]) / m
        self.offset = float(np.sum(weights[keep] * y[keep] ** 2) / m)
        self._clamps = clamps

    @property
    def dim(self) -> int:
        return self.cross.shape[0]

    def value(self, coef: np.ndarray) -> float:
        return float(coef @ self.gram @ coef - 2.0 * self.cross @ coef + self.offset)

    def gradient(self, coef: np.ndarray) -> np.ndarray:
        return 2.0 * (self.gram @ coef - self.cross)

    def curvature(self, coef: np.ndarray) -> float:
        return float(2.0 * np.linalg.eigvalsh(self.gram)[-1])

    def clamp_count(self, coef: np.ndarray) -> int:
        return self._clamps


class OffsetLogisticLoss(SmoothLoss):
    """(1/M) Σ [log(1 + e^{η_i}) - y_i η_i] with η = Xβ + offset."""

    def __init__(self, X: np.ndarray, labels: np.ndarray, offset: np.ndarray):
        self.X = X
        self.labels = labels
        self.offset = offset

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def value(self, coef: np.ndarray) -> float:
        eta = self.X @ coef + self.offset
        return float(np.mean(np.logaddexp(0.0, eta) - self.labels * eta))

    def gradient(self, coef: np.ndarray) -> np.ndarray:
        eta = self.X @ coef + self.offset
        return self.X.T @ (expit(eta) - self.labels) / self.X.shape[0]

    def curvature(self, coef: np.ndarray) -> float:
        p = expit(self.X @ coef + self.offset)
        return _weighted_top_eigenvalue(self.X, p * (1.0 - p))


class BalancingLoss(SmoothLoss):
    """(1/M) Σ [(1 - Γ_i) x_i'β + (Γ_i/γ̂) exp(-x_i'β)].

    Its stationarity condition is the covariate balance
    Σ (1 - Γ_i/ĝ(x_i)) x_i = 0 with 1/ĝ(x) = 1 + exp(-x'β)/γ̂.
    """

    def __init__(self, X: np.ndarray, gamma: np.ndarray, gamma_hat: float):
        self.X = X
        self.gamma = gamma
        self.scale = gamma / gamma_hat

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def value(self, coef: np.ndarray) -> float:
        u = self.X @ coef
        expo, _, _ = clamped_exp_neg(u)
        return float(np.mean((1.0 - self.gamma) * u + self.scale * expo))

    def gradient(self, coef: np.ndarray) -> np.ndarray:
        _, slope, _ = clamped_exp_neg(self.X @ coef)
        return self.X.T @ ((1.0 - self.gamma) + self.scale * slope) / self.X.shape[0]

    def curvature(self, coef: np.ndarray) -> float:
        _, slope, _ = clamped_exp_neg(self.X @ coef)
        return _weighted_top_eigenvalue(self.X, -self.scale * slope)

    def clamp_count(self, coef: np.ndarray) -> int:
        _, _, clamped = clamped_exp_neg(self.X @ coef)
        return int(np.count_nonzero(clamped & (self.gamma == 1)))


def _weighted_top_eigenvalue(X: np.ndarray, weights: np.ndarray) -> float:
    gram = (X * weights[:, None]).T @ X / X.shape[0]
    return float(np.linalg.eigvalsh(gram)[-1])


def _objective(loss: SmoothLoss, coef: np.ndarray, lam: float) -> float:
    return loss.value(coef) + lam * float(np.abs(coef).sum())


def _initial(config: SolverConfig, dim: int) -> np.ndarray:
    if config.init is None:
        return np.zeros(dim)
    init = np.array(config.init, dtype=float, copy=True)
    if init.shape != (dim,):
        raise ValidationError(f"warm start has shape {init.shape}, expected ({dim},)")
    return init


def _coordinate_descent(loss: LeastSquaresLoss, lam: float, config: SolverConfig) -> SolverResult:
    G, c = loss.gram, loss.cross
    diag = np.diag(G).copy()
    coef = _initial(config, loss.dim)
    coef[diag <= 0.0] = 0.0
    Gb = G @ coef
    trace = [_objective(loss, coef, lam)] if config.record_trace else []
    residual = kkt_residual(2.0 * (Gb - c), coef, lam)
    sweeps = 0
    while residual > config.tol and sweeps < config.max_iter:
        sweeps += 1
        for j in range(coef.shape[0]):
            if diag[j] <= 0.0:
                continue
            rho = c[j] - (Gb[j] - diag[j] * coef[j])
            new = soft_threshold(rho, 0.5 * lam) / diag[j]
            delta = new - coef[j]
            if delta != 0.0:
                Gb += G[:, j] * delta
                coef[j] = new
        residual = kkt_residual(2.0 * (Gb - c), coef, lam)
        if config.record_trace:
            trace.append(_objective(loss, coef, lam))
    return SolverResult(
        coefficients=coef,
        objective=_objective(loss, coef, lam),
        kkt_residual=residual,
        iterations=sweeps,
        converged=residual <= config.tol,
        tol=config.tol,
        clamp_count=loss.clamp_count(coef),
        trace=trace,
    )


def _proximal_gradient(loss: SmoothLoss, lam: float, config: SolverConfig) -> SolverResult:
    x = _initial(config, loss.dim)
    f_x, g_x = loss.value_and_gradient(x)
    F_x = f_x + lam * float(np.abs(x).sum())
    L = max(loss.curvature(x), MIN_CURVATURE)
    y, f_y, g_y, t = x, f_x, g_x, 1.0
    trace = [F_x] if config.record_trace else []
    residual = kkt_residual(g_x, x, lam)
    it = 0
    while residual > config.tol and it < config.max_iter:
        it += 1
        L = max(0.9 * L, MIN_CURVATURE)
        while True:
            z = soft_threshold(y - g_y / L, lam / L)
            f_z = loss.value(z)
            step = z - y
            bound = f_y + g_y @ step + 0.5 * L * (step @ step)
            if f_z <= bound + 1e-12 * max(1.0, abs(f_y)):
                break
            L /= config.step_shrink
            if not np.isfinite(L) or L > 1e300:
                raise NumericalError("backtracking failed to find a descent step")
        F_z = f_z + lam * float(np.abs(z).sum())
        if t > 1.0 and F_z > F_x + 1e-12 * max(1.0, abs(F_x)):
            # Momentum overshoot: restart from the last accepted point.
            y, f_y, g_y, t = x, f_x, g_x, 1.0
            continue
        # A plain step from x (t = 1) that passed backtracking exceeds F_x by
        # at most the backtracking slack; it is always accepted.
        g_z = loss.gradient(z)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = z + ((t - 1.0) / t_next) * (z - x)
        x, f_x, g_x, F_x, t = z, f_z, g_z, F_z, t_next
        f_y, g_y = loss.value_and_gradient(y)
        residual = kkt_residual(g_x, x, lam)
        if config.record_trace:
            trace.append(F_x)
    if not np.all(np.isfinite(x)):
        raise NumericalError("solver produced non-finite coefficients")
    return SolverResult(
        coefficients=x,
        objective=F_x,
        kkt_residual=residual,
        iterations=it,
        converged=residual <= config.tol,
        tol=config.tol,
        clamp_count=loss.clamp_count(x),
        trace=trace,
    )


def _design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError(f"design must be a non-empty 2-D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("design matrix contains non-finite values")
    return X


def _vector(v, n: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = np.full(n, float(v))
    if v.shape != (n,):
        raise ValidationError(f"{name} has shape {v.shape}, expected ({n},)")
    if not np.all(np.isfinite(v)):
        raise DataError(f"{name} contains non-finite values")
    return v


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0.0:
        raise ValidationError(f"penalty level must be a finite λ >= 0, got {lam}")
    return lam


def _check_binary(v: np.ndarray, name: str) -> None:
    if not np.all((v == 0.0) | (v == 1.0)):
        raise ValidationError(f"{name} must be 0/1")


def fit_lasso_ls(X, y, weights, lam: float, config: Optional[SolverConfig] = None) -> SolverResult:
    """Minimize (1/M) Σ w_i (y_i - x_i'α)² + λ‖α‖₁.

    Args:
        X: M x d design.
        y: Responses; values on zero-weight rows are ignored.
        weights: Non-negative sample weights.
        lam: Penalty level λ >= 0.
        config: Stopping rule.

    Returns:
        SolverResult: Coefficients with their KKT certificate.

    Raises:
        ValidationError: On shape mismatch, negative weights or λ < 0.
        DataError: If all weights are zero or inputs are non-finite.
    """
    config = config or SolverConfig()
    X = _design(X)
    w = _vector(weights, X.shape[0], "weights")
    if np.any(w < 0.0):
        raise ValidationError("weights must be non-negative")
    if not np.any(w > 0.0):
        raise DataError("all weights are zero")
    y = np.asarray(y, dtype=float)
    if y.shape != (X.shape[0],):
        raise ValidationError(f"response has shape {y.shape}, expected ({X.shape[0]},)")
    y = np.where(w > 0.0, y, 0.0)
    if not np.all(np.isfinite(y)):
        raise DataError("response contains non-finite values on weighted rows")
    return _coordinate_descent(LeastSquaresLoss(X, y, w), _check_lambda(lam), config)


def fit_logistic_l1_offset(
    X, labels, offset, lam: float, config: Optional[SolverConfig] = None
) -> SolverResult:
    """Minimize (1/M) Σ [log(1 + e^{η_i}) - y_i η_i] + λ‖β‖₁, η = Xβ + offset.

    With λ = 0 and perfectly separated labels the coefficients diverge;
    the solve then stops at ``max_iter`` with ``converged=False``.

    Raises:
        ValidationError: On non-binary labels, non-finite offset or λ < 0.
    """
    config = config or SolverConfig()
    X = _design(X)
    y = _vector(labels, X.shape[0], "labels")
    _check_binary(y, "labels")
    try:
        o = _vector(offset, X.shape[0], "offset")
    except DataError as exc:
        raise ValidationError(str(exc)) from exc
    return _proximal_gradient(OffsetLogisticLoss(X, y, o), _check_lambda(lam), config)


def fit_tbr_beta(
    X, gamma, gamma_hat: float, lam_beta: float, config: Optional[SolverConfig] = None
) -> SolverResult:
    """Fit the propensity slope β of ĝ(x) = g(x'β + log γ̂) by covariate balancing.

    Raises:
        ValidationError: If ``gamma_hat`` is outside (0, 1) or λ < 0.
        DataError: If the rows do not contain both Γ = 0 and Γ = 1.
    """
    config = config or SolverConfig()
    X = _design(X)
    gamma = _vector(gamma, X.shape[0], "product indicator")
    _check_binary(gamma, "product indicator")
    if not 0.0 < gamma_hat < 1.0:
        raise ValidationError(f"gamma_hat must lie in (0, 1), got {gamma_hat}")
    if gamma.min() == gamma.max():
        raise DataError("balancing fit needs both labeled and unlabeled rows")
    return _proximal_gradient(BalancingLoss(X, gamma, gamma_hat), _check_lambda(lam_beta), config)


def tbr_alpha_weights(X, gamma, gamma_hat: float, beta_hat) -> tuple[np.ndarray, int]:
    """(Γ_i/γ̂)·exp(-x_i'β̂) with the exponent clamped; also the clamp count."""
    u = X @ np.asarray(beta_hat, dtype=float)
    clamped = np.abs(u) > EXP_CLAMP
    weights = gamma / gamma_hat * np.exp(-np.clip(u, -EXP_CLAMP, EXP_CLAMP))
    return weights, int(np.count_nonzero(clamped & (gamma == 1)))


def fit_tbr_alpha(
    X,
    gamma,
    outcome,
    gamma_hat: float,
    beta_hat,
    lam_alpha: float,
    config: Optional[SolverConfig] = None,
) -> SolverResult:
    """Weighted Lasso for the outcome slope α with weights (Γ/γ̂)·exp(-x'β̂).

    ``outcome`` is only read where Γ = 1.

    Raises:
        ValidationError: On bad ``gamma_hat``, non-finite β̂ or λ < 0.
        DataError: If no row carries positive weight.
    """
    config = config or SolverConfig()
    X = _design(X)
    gamma = _vector(gamma, X.shape[0], "product indicator")
    _check_binary(gamma, "product indicator")
    if not 0.0 < gamma_hat < 1.0:
        raise ValidationError(f"gamma_hat must lie in (0, 1), got {gamma_hat}")
    beta_hat = np.asarray(beta_hat, dtype=float)
    if beta_hat.shape != (X.shape[1],) or not np.all(np.isfinite(beta_hat)):
        raise ValidationError("beta_hat must be a finite vector matching the design")
    weights, clamps = tbr_alpha_weights(X, gamma, gamma_hat, beta_hat)
    if not np.any(weights > 0.0):
        raise DataError("no labeled rows carry weight")
    y = np.where(gamma == 1, np.asarray(outcome, dtype=float), 0.0)
    if not np.all(np.isfinite(y)):
        raise DataError("labeled outcomes contain non-finite values")
    loss = LeastSquaresLoss(X, y, weights, clamps=clamps)
    return _coordinate_descent(loss, _check_lambda(lam_alpha), config)


@dataclass(frozen=True)
class PenalizedProblem:
    """One of the four penalized problems, bound to its data.

    ``kind`` is "lasso_ls", "logistic_offset", "tbr_beta" or "tbr_alpha".
    ``response`` holds y for the least-squares kinds and the 0/1 labels
    (Γ for "tbr_beta") for the others; ``gamma`` is the Γ vector of
    "tbr_alpha".
    """

    kind: str
    X: np.ndarray
    response: np.ndarray
    weights: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    gamma_hat: Optional[float] = None
    beta_hat: Optional[np.ndarray] = None

    KINDS = ("lasso_ls", "logistic_offset", "tbr_beta", "tbr_alpha")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValidationError(f"Unknown problem kind: {self.kind}. Valid: {', '.join(self.KINDS)}")

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    def subset(self, idx: np.ndarray) -> PenalizedProblem:
        def take(v):
            return None if v is None else np.asarray(v)[idx]

        return replace(
            self,
            X=self.X[idx],
            response=self.response[idx],
            weights=take(self.weights),
            offset=take(self.offset),
            gamma=take(self.gamma),
        )

    def strata(self) -> Optional[np.ndarray]:
        """Labels CV folds are stratified on; None for plain least squares."""
        if self.kind in ("logistic_offset", "tbr_beta"):
            return self.response
        if self.kind == "tbr_alpha":
            return self.gamma
        return None

    def loss(self) -> SmoothLoss:
        if self.kind == "lasso_ls":
            w = np.ones(self.n) if self.weights is None else self.weights
            return LeastSquaresLoss(self.X, np.where(w > 0, self.response, 0.0), w)
        if self.kind == "logistic_offset":
            offset = np.zeros(self.n) if self.offset is None else self.offset
            return OffsetLogisticLoss(self.X, self.response, offset)
        if self.kind == "tbr_beta":
            return BalancingLoss(self.X, self.response, self.gamma_hat)
        weights, clamps = tbr_alpha_weights(self.X, self.gamma, self.gamma_hat, self.beta_hat)
        y = np.where(self.gamma == 1, self.response, 0.0)
        return LeastSquaresLoss(self.X, y, weights, clamps=clamps)

    def fit(self, lam: float, config: Optional[SolverConfig] = None) -> SolverResult:
        if self.kind == "lasso_ls":
            w = np.ones(self.n) if self.weights is None else self.weights
            return fit_lasso_ls(self.X, self.response, w, lam, config)
        if self.kind == "logistic_offset":
            offset = 0.0 if self.offset is None else self.offset
            return fit_logistic_l1_offset(self.X, self.response, offset, lam, config)
        if self.kind == "tbr_beta":
            return fit_tbr_beta(self.X, self.response, self.gamma_hat, lam, config)
        return fit_tbr_alpha(
            self.X, self.gamma, self.response, self.gamma_hat, self.beta_hat, lam, config
        )

    def lambda_max(self) -> float:
        """Smallest λ at which the all-zero vector satisfies the KKT conditions."""
        loss = self.loss()
        return float(np.max(np.abs(loss.gradient(np.zeros(loss.dim)))))


def lambda_grid(problem: PenalizedProblem, n_lambda: int = 50, min_ratio: float = 1e-3) -> np.ndarray:
    """Descending geometric grid from λ_max down to ``min_ratio``·λ_max."""
    top = max(problem.lambda_max(), 1e-10)
    if n_lambda == 1:
        return np.array([top])
    return np.geomspace(top, top * min_ratio, n_lambda)


def usable_cv_folds(problem: PenalizedProblem, n_cv_folds: int) -> int:
    """Folds that fit the data: at most one per row, or per Γ = 1 row when stratified."""
    strata = problem.strata()
    available = problem.n if strata is None else int(np.count_nonzero(strata == 1))
    return min(n_cv_folds, available)


def _cv_assignment(problem: PenalizedProblem, n_cv_folds: int, seed: int) -> np.ndarray:
    strata = problem.strata()
    if strata is None:
        return make_folds(problem.n, n_cv_folds, seed).assignment
    if np.count_nonzero(strata == 1) < n_cv_folds:
        raise DataError(
            f"cross-validation needs at least {n_cv_folds} rows with Γ = 1, "
            f"found {int(np.count_nonzero(strata == 1))}"
        )
    return stratified_assignment(strata, n_cv_folds, seed)


def cv_loss_path(
    problem: PenalizedProblem,
    grid: np.ndarray,
    n_cv_folds: int = 5,
    seed: int = 0,
    config: Optional[SolverConfig] = None,
) -> np.ndarray:
    """Mean held-out unpenalized loss at each grid value.

    Each training slice is solved along the descending grid, warm
    starting from the previous solution.
    """
    config = config or SolverConfig()
    if problem.n < n_cv_folds:
        raise DataError(f"cannot run {n_cv_folds}-fold CV on {problem.n} rows")
    assignment = _cv_assignment(problem, n_cv_folds, seed)
    losses = np.zeros((n_cv_folds, grid.shape[0]))
    for k in range(1, n_cv_folds + 1):
        train = problem.subset(np.flatnonzero(assignment != k))
        held_out = problem.subset(np.flatnonzero(assignment == k)).loss()
        warm = config
        for i, lam in enumerate(grid):
            result = train.fit(lam, warm)
            losses[k - 1, i] = held_out.value(result.coefficients)
            warm = config.model_copy(update={"init": result.coefficients})
    return losses.mean(axis=0)


def cross_validate_lambda(
    problem: PenalizedProblem,
    grid: Optional[np.ndarray] = None,
    n_cv_folds: int = 5,
    seed: int = 0,
    config: Optional[SolverConfig] = None,
    n_lambda: int = 50,
    min_ratio: float = 1e-3,
) -> float:
    """Choose λ from ``grid`` by K-fold cross-validation.

    Folds are stratified by Γ where the problem has one. The grid value
    with the smallest mean held-out loss wins; ties go to the larger λ.
    A single-point grid is returned as-is without fitting. On small
    slices the fold count is lowered to the usable rows (``usable_cv_folds``);
    below two folds the largest grid value is returned.

    Raises:
        ValidationError: On an empty grid or a negative grid value.
    """
    if grid is None:
        grid = lambda_grid(problem, n_lambda, min_ratio)
    grid = np.sort(np.asarray(grid, dtype=float))[::-1]
    if grid.size == 0:
        raise ValidationError("lambda grid is empty")
    if np.any(grid < 0.0) or not np.all(np.isfinite(grid)):
        raise ValidationError("lambda grid values must be finite and non-negative")
    if grid.size == 1:
        return float(grid[0])
    folds = usable_cv_folds(problem, n_cv_folds)
    if folds < 2:
        logger.warning(
            "%s: %d usable row(s), too few for CV; using λ=%.4g", problem.kind, folds, grid[0]
        )
        return float(grid[0])
    if folds < n_cv_folds:
        logger.info("%s: CV folds lowered from %d to %d", problem.kind, n_cv_folds, folds)
    path = cv_loss_path(problem, grid, folds, seed, config)
    best = int(np.flatnonzero(path == path.min())[0])
    logger.debug("%s CV chose λ=%.4g (grid %.4g..%.4g)", problem.kind, grid[best], grid[0], grid[-1])
    return float(grid[best])
