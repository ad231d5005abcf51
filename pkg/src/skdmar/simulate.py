"""
Simulation designs, truth oracles and the Monte Carlo replication harness.

Designs (a)-(c) have labeling rates that shrink with N: the intercepts
of the labeling models are calibrated so that E[Γ^{(j)}] hits a target.
Designs (d)-(e) are fully labeled with hard treatment overlap.
Covariates are an intercept plus i.i.d. N(0, 1) draws truncated to
(-2, 2).
"""

from __future__ import annotations

import logging
import zlib
from collections.abc import Callable
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit
from scipy.stats import median_abs_deviation, norm

from .core import build_product_indicator, child_seed
from .errors import DataError, NumericalError, SkdmarError, ValidationError
from .estimators import ESTIMATOR_NAMES, estimate_ate
from .models import (
    Dataset,
    DgpName,
    DgpSpec,
    EstimatorMetrics,
    MetricsTable,
    StudyConfig,
)

logger = logging.getLogger("skdmar.simulate")

TRUNCATION = 2.0
TRUNCATED_VARIANCE = float(
    1.0 - 2.0 * TRUNCATION * norm.pdf(TRUNCATION) / (2.0 * norm.cdf(TRUNCATION) - 1.0)
)
MAD_SCALE = 1.4826
INTERCEPT_BRACKET = (-30.0, 5.0)


def truncated_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Standard normal draws conditioned on |z| < TRUNCATION, by rejection."""
    out = rng.standard_normal(size)
    bad = np.abs(out) >= TRUNCATION
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) >= TRUNCATION
    return out


def gen_covariates(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """N x d design with X_1 = 1 and truncated-normal remaining columns."""
    X = np.empty((n, d))
    X[:, 0] = 1.0
    X[:, 1:] = truncated_normal(rng, (n, d - 1))
    return X


@dataclass(frozen=True)
class DgpParameters:
    """Coefficient vectors of a design (arm-1 versions; arm 0 flips signs).

    ``label_slope`` is β(1) without its calibrated intercept; ``treatment``
    is ω for (b) and the treatment index for (d)/(e).
    """

    alpha: np.ndarray
    eta: Optional[np.ndarray]
    label_slope: Optional[np.ndarray]
    treatment: Optional[np.ndarray]


def dgp_parameters(spec: DgpSpec) -> DgpParameters:
    d, s_a, s_b = spec.d, spec.s_alpha, spec.s_beta
    if spec.dgp.supervised:
        powers = np.arange(d)
        alpha = 3.0 * 0.9**powers
        eta = None
        if spec.dgp == DgpName.E:
            eta = np.where(powers == 0, 0.0, 0.9**powers)
        if spec.dgp == DgpName.D:
            index = np.where(powers == 0, 0.99, 0.5 * 0.7**powers)
        else:
            index = np.where(powers == 0, 0.2247, 0.7**powers)
        return DgpParameters(alpha=alpha, eta=eta, label_slope=None, treatment=index)

    alpha = np.zeros(d)
    alpha[:2] = 3.0
    alpha[2 : s_a + 1] = 3.0 / np.sqrt(s_a - 1)
    eta = None
    if spec.dgp == DgpName.C:
        eta = np.zeros(d)
        eta[1] = 1.0
        eta[2 : s_a + 1] = 1.0 / np.sqrt(s_a - 1)
    slope = np.zeros(d)
    slope[1] = 1.0
    slope[2 : s_b + 1] = 1.0 / (s_b - 1)
    omega = slope.copy() if spec.dgp == DgpName.B else None
    return DgpParameters(alpha=alpha, eta=eta, label_slope=slope, treatment=omega)


def calibrate_intercept(
    mean_rate: Callable[[float], float],
    target: float,
    tol: float = 2e-3,
    bracket: tuple[float, float] = INTERCEPT_BRACKET,
) -> float:
    """Bisect for b with mean_rate(b) = target; ``mean_rate`` must increase in b.

    Raises:
        NumericalError: If the target is not bracketed or not reached within tol.
    """
    lo, hi = bracket
    f_lo, f_hi = mean_rate(lo) - target, mean_rate(hi) - target
    if not f_lo < 0.0 < f_hi:
        raise NumericalError(f"could not bracket the labeling rate {target} in {bracket}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = mean_rate(mid) - target
        if abs(f_mid) <= 1e-3 * tol or hi - lo < 1e-12:
            break
        if f_mid < 0.0:
            lo = mid
        else:
            hi = mid
    if abs(f_mid) > tol:
        raise NumericalError(f"labeling rate {target} missed by {abs(f_mid):.3g}")
    return mid


def calibrate_offset(
    spec: DgpSpec,
    arm: int,
    mc_draws: int = 1_000_000,
    tol: float = 2e-3,
    seed: Optional[int] = None,
) -> float:
    """Intercept β_N(arm) making E[Γ^{(arm)}] equal the design's target.

    Uses ``mc_draws`` common draws of the covariates the labeling model
    depends on; both arms share them.

    Raises:
        ValidationError: For fully labeled designs.
    """
    if spec.gamma_target is None or spec.dgp.supervised:
        raise ValidationError(f"DGP ({spec.dgp.value}) has no labeling offset to calibrate")
    params = dgp_parameters(spec)
    target = spec.gamma_target[0] if arm == 1 else spec.gamma_target[1]
    rng = np.random.default_rng(child_seed(spec.seed if seed is None else seed, 101))
    Z = truncated_normal(rng, (mc_draws, spec.s_beta))
    index = Z @ params.label_slope[1 : spec.s_beta + 1]
    sign = 1.0 if arm == 1 else -1.0
    if spec.dgp == DgpName.B:
        pi = 0.3 * np.sin(Z @ params.treatment[1 : spec.s_beta + 1]) + 0.5
        share = pi if arm == 1 else 1.0 - pi
    else:
        share = np.ones(mc_draws)

    def mean_rate(b: float) -> float:
        return float(np.mean(share * expit(b + sign * index)))

    offset = calibrate_intercept(mean_rate, target, tol)
    logger.debug("DGP (%s) arm %d: offset %.6f for target %g", spec.dgp.value, arm, offset, target)
    return offset


def analytic_ate(spec: DgpSpec) -> float:
    """Closed-form μ₀ = 2·(α_1 + v·Σ η_k) with v the truncated variance."""
    params = dgp_parameters(spec)
    quad = 0.0 if params.eta is None else TRUNCATED_VARIANCE * float(params.eta.sum())
    return 2.0 * (float(params.alpha[0]) + quad)


def true_ate(
    spec: DgpSpec, mc_draws: int = 10_000_000, seed: Optional[int] = None, chunk: int = 200_000
) -> tuple[float, float]:
    """True ATE μ₀ and its Monte Carlo standard error.

    Linear designs take the closed form of ``analytic_ate`` (standard
    error 0); quadratic designs average m(1, X) - m(0, X) over
    ``mc_draws`` chunked draws.
    """
    params = dgp_parameters(spec)
    if params.eta is None:
        return analytic_ate(spec), 0.0
    support = np.flatnonzero(params.eta)
    rng = np.random.default_rng(child_seed(spec.seed if seed is None else seed, 202))
    total = total_sq = 0.0
    remaining = mc_draws
    while remaining > 0:
        size = min(chunk, remaining)
        Z = truncated_normal(rng, (size, support.size))
        effect = 2.0 * (params.alpha[0] + (Z**2) @ params.eta[support])
        total += float(effect.sum())
        total_sq += float((effect**2).sum())
        remaining -= size
    mean = total / mc_draws
    var = max(total_sq / mc_draws - mean**2, 0.0)
    return mean, float(np.sqrt(var / mc_draws))


@dataclass(frozen=True)
class TruthOracle:
    """Exact nuisance functions and estimands of one simulation design."""

    spec: DgpSpec
    params: DgpParameters
    offsets: Optional[tuple[float, float]]
    mu0: float
    mu0_se: float = 0.0

    def m(self, arm: int, X: np.ndarray) -> np.ndarray:
        """Outcome regression m(arm, x)."""
        value = X @ self.params.alpha
        if self.params.eta is not None:
            value = value + (X**2) @ self.params.eta
        return value if arm == 1 else -value

    def theta(self, arm: int) -> float:
        return 0.5 * self.mu0 if arm == 1 else -0.5 * self.mu0

    def _label_index(self, arm: int, X: np.ndarray) -> np.ndarray:
        sign = 1.0 if arm == 1 else -1.0
        offset = self.offsets[0] if arm == 1 else self.offsets[1]
        return offset + sign * (X @ self.params.label_slope)

    def pi(self, X: np.ndarray) -> np.ndarray:
        """Treatment propensity P(T = 1 | X = x)."""
        dgp = self.spec.dgp
        if dgp == DgpName.B:
            return 0.3 * np.sin(X @ self.params.treatment) + 0.5
        if dgp == DgpName.D:
            index = X @ self.params.treatment
            return expit(index) * (0.3 * np.sin(index) + 0.7)
        if dgp == DgpName.E:
            return expit(X @ self.params.treatment)
        return 0.5 * (self.gamma(1, X) + 1.0 - self.gamma(0, X))

    def label_prob(self, arm: int, X: np.ndarray) -> np.ndarray:
        """Labeling probability p(arm, x) = P(R = 1 | T = arm, X = x)."""
        dgp = self.spec.dgp
        if dgp.supervised:
            return np.ones(X.shape[0])
        if dgp == DgpName.B:
            return expit(self._label_index(arm, X))
        pi = self.pi(X)
        return self.gamma(arm, X) / (pi if arm == 1 else 1.0 - pi)

    def gamma(self, arm: int, X: np.ndarray) -> np.ndarray:
        """Product propensity γ(arm, x) = P(T = arm, R = 1 | X = x)."""
        dgp = self.spec.dgp
        if dgp.supervised:
            pi = self.pi(X)
            return pi if arm == 1 else 1.0 - pi
        if dgp == DgpName.B:
            pi = self.pi(X)
            return (pi if arm == 1 else 1.0 - pi) * self.label_prob(arm, X)
        return expit(self._label_index(arm, X))

    def psi_opt(self, dataset: Dataset, arm: int) -> np.ndarray:
        """Efficient influence values m(arm, X) - θ_arm + Γ/γ·(Y - m(arm, X))."""
        X = dataset.covariates
        gamma = build_product_indicator(dataset, arm).values
        y = dataset.masked_outcome(gamma == 1)
        m = self.m(arm, X)
        return m - self.theta(arm) + gamma / self.gamma(arm, X) * (y - m)


def build_oracle(
    spec: DgpSpec,
    mc_draws: int = 1_000_000,
    tol: float = 2e-3,
    truth_draws: int = 10_000_000,
) -> TruthOracle:
    """Calibrate the labeling intercepts and compute μ₀ for ``spec``.

    Raises:
        ValidationError: If the calibrated intercepts cannot give labeling
            probabilities in [0, 1].
    """
    params = dgp_parameters(spec)
    offsets = None
    if not spec.dgp.supervised:
        offsets = (
            calibrate_offset(spec, 1, mc_draws, tol),
            calibrate_offset(spec, 0, mc_draws, tol),
        )
        if spec.dgp != DgpName.B and offsets[0] + offsets[1] > 0.0:
            raise ValidationError(
                f"gamma targets {spec.gamma_target} are too large for DGP "
                f"({spec.dgp.value}): labeling probabilities would exceed 1"
            )
    mu0, se = true_ate(spec, truth_draws)
    logger.info("DGP (%s): mu0=%.6g (MC se %.2g), offsets=%s", spec.dgp.value, mu0, se, offsets)
    return TruthOracle(spec=spec, params=params, offsets=offsets, mu0=mu0, mu0_se=se)


def realized_rates(
    oracle: TruthOracle, n_draws: int, seed: int = 0, chunk: int = 50_000
) -> tuple[float, float]:
    """Mean of γ(1, X) and γ(0, X) over fresh covariate draws."""
    rng = np.random.default_rng(child_seed(seed, 303))
    sums = np.zeros(2)
    remaining = n_draws
    while remaining > 0:
        size = min(chunk, remaining)
        X = gen_covariates(size, oracle.spec.d, rng)
        sums += [oracle.gamma(1, X).sum(), oracle.gamma(0, X).sum()]
        remaining -= size
    return float(sums[0] / n_draws), float(sums[1] / n_draws)


@dataclass(frozen=True)
class SimulatedDraw:
    """A generated dataset with both potential outcomes kept for checks."""

    dataset: Dataset
    y1: np.ndarray
    y0: np.ndarray


def simulate_draw(spec: DgpSpec, oracle: TruthOracle, rng: np.random.Generator) -> SimulatedDraw:
    """Draw X, then T, then R, then the shared noise, in that order."""
    n = spec.n
    X = gen_covariates(n, spec.d, rng)
    treatment = (rng.random(n) < oracle.pi(X)).astype(float)
    p = np.where(treatment == 1.0, oracle.label_prob(1, X), oracle.label_prob(0, X))
    labels = (rng.random(n) < p).astype(np.int8)
    noise = rng.standard_normal(n)
    y1 = oracle.m(1, X) + noise
    y0 = oracle.m(0, X) + noise
    y = np.where(treatment == 1.0, y1, y0)
    dataset = Dataset(
        covariates=X,
        outcome_label=labels,
        treatment=treatment,
        outcome_values=np.where(labels == 1, y, np.nan),
    )
    return SimulatedDraw(dataset=dataset, y1=y1, y0=y0)


def gen_dataset(spec: DgpSpec, oracle: TruthOracle, rng: np.random.Generator) -> Dataset:
    return simulate_draw(spec, oracle, rng).dataset


def estimator_key(name: str) -> int:
    """Stable seed key of an estimator, independent of its position in a study."""
    return zlib.crc32(name.encode("utf-8"))


def run_replication(
    spec: DgpSpec, oracle: TruthOracle, config: StudyConfig, rep: int
) -> list[dict]:
    """Run every estimator on replication ``rep``; failures become records."""
    seed = config.base_seed + rep
    dataset = gen_dataset(spec, oracle, np.random.default_rng(seed))
    records = []
    for name in config.estimators:
        record = {"rep": rep, "estimator": name, "failed": False, "error": ""}
        try:
            report = estimate_ate(
                name,
                dataset,
                tuning=config.tuning,
                k_folds=config.k_folds,
                seed=child_seed(seed, estimator_key(name)),
                n_repeats=config.n_repeats,
                ci_level=config.ci_level,
                oracle=oracle,
            )
        except (SkdmarError, np.linalg.LinAlgError) as exc:
            logger.warning("replication %d, %s failed: %s", rep, name, exc)
            record.update(failed=True, error=str(exc))
            record.update(mu_hat=np.nan, se=np.nan, ci_lo=np.nan, ci_hi=np.nan)
        else:
            record.update(
                mu_hat=report.mu_hat, se=report.se, ci_lo=report.ci[0], ci_hi=report.ci[1]
            )
        records.append(record)
    return records


def collect_replications(
    spec: DgpSpec, config: StudyConfig, oracle: Optional[TruthOracle] = None
) -> pd.DataFrame:
    """One row per (replication, estimator), independent of ``workers``."""
    unknown = [name for name in config.estimators if name not in ESTIMATOR_NAMES]
    if unknown:
        raise ValidationError(
            f"Unknown estimator: {', '.join(unknown)}. Valid: {', '.join(ESTIMATOR_NAMES)}"
        )
    oracle = oracle or build_oracle(spec)
    batches = Parallel(n_jobs=config.workers)(
        delayed(run_replication)(spec, oracle, config, rep) for rep in range(config.n_reps)
    )
    return pd.DataFrame([record for batch in batches for record in batch])


def summarize(frame: pd.DataFrame, mu0: float, config: StudyConfig, header: str) -> MetricsTable:
    """Median-based metrics per estimator, in ``config.estimators`` order."""
    rows = []
    for name in config.estimators:
        runs = frame[frame["estimator"] == name]
        ok = runs[~runs["failed"]]
        n_fail = int(runs["failed"].sum())
        if ok.empty:
            nan = float("nan")
            rows.append(
                EstimatorMetrics(
                    estimator=name, bias=nan, rmse=nan, length=nan, coverage=nan,
                    esd=nan, asd=nan, n_ok=0, n_fail=n_fail,
                )
            )
            continue
        mu_hat = ok["mu_hat"].to_numpy()
        err = mu_hat - mu0
        lo, hi = ok["ci_lo"].to_numpy(), ok["ci_hi"].to_numpy()
        rows.append(
            EstimatorMetrics(
                estimator=name,
                bias=float(np.median(err)),
                rmse=float(np.sqrt(np.median(err**2))),
                length=float(np.median(hi - lo)),
                coverage=float(np.mean((lo <= mu0) & (mu0 <= hi))),
                esd=MAD_SCALE * float(median_abs_deviation(mu_hat)),
                asd=float(np.median(ok["se"].to_numpy())),
                n_ok=len(ok),
                n_fail=n_fail,
            )
        )
    valid = all(row.n_fail < config.max_fail_rate * config.n_reps for row in rows)
    return MetricsTable(header=header, mu0=mu0, n_reps=config.n_reps, rows=rows, valid=valid)


def run_replications(
    spec: DgpSpec, config: StudyConfig, oracle: Optional[TruthOracle] = None
) -> MetricsTable:
    """Monte Carlo study of ``config.estimators`` on design ``spec``.

    Replication r draws its data from seed ``base_seed + r``, so the
    table is the same for any number of workers.

    Raises:
        ValidationError: If an estimator name is unknown.
        DataError: If no replication produced any record.
    """
    oracle = oracle or build_oracle(spec)
    frame = collect_replications(spec, config, oracle)
    if frame.empty:
        raise DataError("no replications were run")
    table = summarize(frame, oracle.mu0, config, spec.header())
    if not table.valid:
        logger.warning("more than %.0f%% of replications failed", 100 * config.max_fail_rate)
    return table
