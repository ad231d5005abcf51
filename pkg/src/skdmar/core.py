"""
Shared primitives: product indicators, fold splitting, overlap and seeds.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import DataError, ValidationError
from .models import Dataset, FoldAssignment, ProductIndicator

logger = logging.getLogger("skdmar.core")


def build_product_indicator(dataset: Dataset, arm: int) -> ProductIndicator:
    """Build Γ^{(arm)}_i = 1{T_i = arm}·R_i (times R_T,i when present).

    Args:
        dataset: The sample.
        arm: Treatment arm, 0 or 1.

    Returns:
        ProductIndicator: One 0/1 entry per sample.

    Raises:
        ValidationError: If ``arm`` is not 0 or 1.
    """
    if arm not in (0, 1):
        raise ValidationError(f"arm must be 0 or 1, got {arm!r}")
    gamma = dataset.arm_indicator(arm) * dataset.outcome_label
    if dataset.treatment_label is not None:
        gamma = gamma * dataset.treatment_label
    return ProductIndicator(arm=arm, values=gamma)


def make_folds(n: int, k_folds: int, seed: int) -> FoldAssignment:
    """Uniformly random partition of ``n`` samples into ``k_folds`` folds.

    Fold sizes differ by at most one. The same ``(n, k_folds, seed)``
    always produces the same assignment.

    Raises:
        ValidationError: If ``k_folds < 2`` or ``n < k_folds``.
    """
    if k_folds < 2:
        raise ValidationError(f"need at least 2 folds, got {k_folds}")
    if n < k_folds:
        raise ValidationError(f"cannot split {n} samples into {k_folds} folds")
    order = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % k_folds + 1
    return FoldAssignment(n=n, k_folds=k_folds, assignment=assignment, seed=seed)


def stratified_assignment(strata: np.ndarray, k_folds: int, seed: int) -> np.ndarray:
    """Fold labels 1..K balancing each stratum across folds.

    Samples of each stratum are shuffled and dealt round-robin, strata
    one after another, so every fold gets ``count // K`` or one more
    sample of every stratum.
    """
    rng = np.random.default_rng(seed)
    strata = np.asarray(strata)
    order = np.concatenate(
        [rng.permutation(np.flatnonzero(strata == s)) for s in np.unique(strata)]
    )
    assignment = np.empty(strata.shape[0], dtype=np.int64)
    assignment[order] = np.arange(order.shape[0]) % k_folds + 1
    return assignment


def propensity_floor(n: int) -> float:
    """Clipping floor 1/(2N) for propensity evaluations."""
    return 1.0 / (2.0 * n)


def effective_overlap(ps_values: np.ndarray) -> float:
    """â = 1 / mean(1/γ̃): the harmonic mean of the propensity values.

    Raises:
        DataError: If any value is not strictly positive.
    """
    values = np.asarray(ps_values, dtype=float)
    if values.size == 0:
        raise DataError("no propensity values to summarize")
    if np.any(~np.isfinite(values)) or np.any(values <= 0.0):
        raise DataError("propensity values must be finite and strictly positive")
    return float(1.0 / np.mean(1.0 / values))


def child_seed(seed: int, *keys: int) -> int:
    """Deterministic independent seed for the stream named by ``keys``."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])
