"""
Error hierarchy for skdmar.

Every error carries the process exit code the CLI uses when it aborts
on it, so commands can surface failures without a lookup table.
"""

from __future__ import annotations


class SkdmarError(Exception):
    """Base class for all skdmar failures."""

    exit_code: int = 1


class ValidationError(SkdmarError):
    """Invalid configuration or argument (bad level, unknown method, λ < 0)."""

    exit_code = 2


class DataError(SkdmarError):
    """Input data cannot support the requested fit.

    Raised for malformed CSV input, empty-arm folds, degenerate
    labels in a half or slice, and similar data-level problems.
    """

    exit_code = 3


class ContractViolation(DataError, LookupError):
    """An unlabeled outcome was read."""


class NumericalError(SkdmarError):
    """A computation produced non-finite values or failed to bracket."""

    exit_code = 4


class TableInvalidError(NumericalError):
    """Too many replications failed for a simulation table to be valid."""
