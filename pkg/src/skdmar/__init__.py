"""
SKDMAR - semi-supervised ATE estimation under decaying missing-at-random labels.

Copyright (C) 2025 smilinTux
Licensed under GPL-3.0-or-later.
"""

__version__ = "0.1.0"

from .errors import (
    ContractViolation,
    DataError,
    NumericalError,
    SkdmarError,
    TableInvalidError,
    ValidationError,
)
from .models import (
    AteReport,
    Dataset,
    DgpName,
    DgpSpec,
    LambdaPolicy,
    LearnerSpec,
    MetricsTable,
    OutcomeMethod,
    PropensityMethod,
    SolverConfig,
    StudyConfig,
)
from .core import build_product_indicator, make_folds
from .estimators import ESTIMATOR_NAMES, brss_ate, dr_dmar_ate, estimate_ate
from .simulate import build_oracle, gen_dataset, run_replications
from .storage import load_dataset_csv, save_dataset_csv

__all__ = [
    "AteReport",
    "ContractViolation",
    "DataError",
    "Dataset",
    "DgpName",
    "DgpSpec",
    "ESTIMATOR_NAMES",
    "LambdaPolicy",
    "LearnerSpec",
    "MetricsTable",
    "NumericalError",
    "OutcomeMethod",
    "PropensityMethod",
    "SkdmarError",
    "SolverConfig",
    "StudyConfig",
    "TableInvalidError",
    "ValidationError",
    "brss_ate",
    "build_oracle",
    "build_product_indicator",
    "dr_dmar_ate",
    "estimate_ate",
    "gen_dataset",
    "load_dataset_csv",
    "make_folds",
    "run_replications",
    "save_dataset_csv",
    "__version__",
]
