"""
File I/O for datasets, reports, metrics tables and run configuration.

Datasets use the CSV schema ``r,t,y,x1..xd`` with an optional ``rt``
column for missing treatments; empty ``y`` (or ``t``) cells mark missing
values. Every written result gets a YAML metadata sidecar next to it.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd
import yaml

from .errors import DataError, ValidationError
from .models import AteReport, Dataset, MetricsTable

logger = logging.getLogger("skdmar.storage")

FLOAT_FORMAT = "%.17g"
REQUIRED_COLUMNS = ("r", "t", "y")

PathLike = Union[str, Path]


def _covariate_columns(columns: list[str]) -> list[str]:
    extra = [c for c in columns if c not in (*REQUIRED_COLUMNS, "rt")]
    expected = [f"x{i}" for i in range(1, len(extra) + 1)]
    if not extra or extra != expected:
        raise DataError(
            f"expected covariate columns x1..x{len(extra) or 'd'} in order, got {extra}"
        )
    return extra


def load_dataset_csv(path: PathLike) -> Dataset:
    """Read a dataset CSV and prepend the intercept column.

    Args:
        path: CSV with header ``r,t,y,x1..xd`` and optionally ``rt``.

    Returns:
        Dataset: The validated sample with d + 1 covariate columns.

    Raises:
        DataError: On a malformed header, non-numeric cells or a labeled
            row without an outcome.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path.name}: {exc}") from exc
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path.name} is missing column(s): {', '.join(missing)}")
    covariates = _covariate_columns(list(frame.columns))
    try:
        frame = frame.apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path.name} contains a non-numeric cell: {exc}") from exc

    r = frame["r"].to_numpy()
    if np.any(np.isnan(r)):
        raise DataError(f"{path.name}: column r has empty cells")
    unlabeled_y = np.flatnonzero((r == 1) & frame["y"].isna().to_numpy())
    if unlabeled_y.size:
        raise DataError(f"{path.name}: row {unlabeled_y[0] + 1} has r=1 but no y")

    X = np.column_stack([np.ones(len(frame)), frame[covariates].to_numpy(dtype=float)])
    t = frame["t"].to_numpy(dtype=float)
    if "rt" in frame.columns:
        rt = frame["rt"].to_numpy()
        if np.any(np.isnan(rt)):
            raise DataError(f"{path.name}: column rt has empty cells")
        if np.any(np.isnan(t) & (rt == 1)):
            raise DataError(f"{path.name}: t is empty on a row with rt=1")
        dataset = Dataset(
            covariates=X,
            outcome_label=r * rt,
            treatment_label=rt,
            response_label=r,
            treatment=np.where(rt == 1, t, np.nan),
            outcome_values=frame["y"].to_numpy(dtype=float),
        )
    else:
        if np.any(np.isnan(t)):
            raise DataError(f"{path.name}: t has empty cells and there is no rt column")
        dataset = Dataset(
            covariates=X,
            outcome_label=r,
            treatment=t,
            outcome_values=frame["y"].to_numpy(dtype=float),
        )
    logger.info("Loaded %s: N=%d, d=%d", path.name, dataset.n, dataset.d)
    return dataset


def save_dataset_csv(dataset: Dataset, path: PathLike) -> Path:
    """Write ``dataset`` in the CSV schema ``load_dataset_csv`` reads.

    Raises:
        DataError: If column 0 of the covariates is not the intercept.
    """
    if not np.all(dataset.covariates[:, 0] == 1.0):
        raise DataError("the first covariate column must be the intercept")
    columns: dict[str, Any] = {
        "r": dataset.label_response.astype(int),
        "t": dataset.treatment,
        "y": dataset.outcome_values,
    }
    if dataset.treatment_label is not None:
        columns["rt"] = dataset.treatment_label.astype(int)
    for i in range(1, dataset.d):
        columns[f"x{i}"] = dataset.covariates[:, i]
    path = Path(path)
    pd.DataFrame(columns).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("Wrote dataset %s", path)
    return path


def write_metadata(metadata: dict[str, Any], result_path: PathLike) -> Path:
    """YAML sidecar ``<stem>.meta.yml`` next to a result file."""
    result_path = Path(result_path)
    meta_path = result_path.with_name(result_path.stem + ".meta.yml")
    meta_path.write_text(
        yaml.dump(metadata, default_flow_style=False, sort_keys=False), encoding="utf-8"
    )
    return meta_path


def write_report_csv(
    report: AteReport, path: PathLike, metadata: Optional[dict[str, Any]] = None
) -> Path:
    """Single-row CSV of ``report.to_records()`` at full float precision."""
    path = Path(path)
    pd.DataFrame([dict(report.to_records())]).to_csv(
        path, index=False, float_format=FLOAT_FORMAT
    )
    if metadata is not None:
        write_metadata(metadata, path)
    logger.info("Wrote report %s", path)
    return path


def write_metrics_csv(
    table: MetricsTable, path: PathLike, metadata: Optional[dict[str, Any]] = None
) -> Path:
    """One row per estimator: bias, rmse, length, coverage, esd, asd, n_fail."""
    path = Path(path)
    table.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)
    if metadata is not None:
        write_metadata(
            {**metadata, "header": table.header, "mu0": table.mu0, "valid": table.valid},
            path,
        )
    logger.info("Wrote metrics %s", path)
    return path


def _parse_key_values(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {number} is not key=value: {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: PathLike) -> dict[str, Any]:
    """Read option defaults from a YAML mapping or ``key=value`` lines.

    Keys are option names with dashes mapped to underscores.

    Raises:
        ValidationError: If the file is neither form.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError:
        data = None
    if data is None and text.strip():
        data = _parse_key_values(text)
    elif not isinstance(data, dict):
        data = _parse_key_values(text) if text.strip() else {}
    return {str(k).replace("-", "_"): v for k, v in data.items()}
