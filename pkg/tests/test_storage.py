"""Tests for dataset, result and config files."""

import numpy as np
import pandas as pd
import pytest
import yaml

from skdmar.errors import DataError, ValidationError
from skdmar.estimators import estimate_ate
from skdmar.models import EstimatorMetrics, MetricsTable
from skdmar.nuisance import fit_or_lasso
from skdmar.storage import (
    load_config,
    load_dataset_csv,
    save_dataset_csv,
    write_metadata,
    write_metrics_csv,
    write_report_csv,
)


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadDataset:
    def test_intercept_is_prepended(self, tmp_path):
        path = _write(tmp_path, "r,t,y,x1,x2\n1,1,2.5,0.1,0.2\n0,0,,0.3,0.4\n1,0,1.0,0.5,0.6\n")
        dataset = load_dataset_csv(path)
        assert dataset.n == 3
        assert dataset.d == 3
        np.testing.assert_array_equal(dataset.covariates[:, 0], 1.0)
        np.testing.assert_array_equal(dataset.covariates[:, 2], [0.2, 0.4, 0.6])
        assert np.isnan(dataset.outcome_values[1])

    def test_labeled_row_without_outcome(self, tmp_path):
        path = _write(tmp_path, "r,t,y,x1\n1,1,2.0,0.1\n1,0,,0.3\n")
        with pytest.raises(DataError, match="row 2 has r=1 but no y"):
            load_dataset_csv(path)

    def test_missing_column(self, tmp_path):
        path = _write(tmp_path, "r,y,x1\n1,2.0,0.1\n")
        with pytest.raises(DataError, match="missing column"):
            load_dataset_csv(path)

    def test_covariates_out_of_order(self, tmp_path):
        path = _write(tmp_path, "r,t,y,x2,x1\n1,1,2.0,0.1,0.2\n")
        with pytest.raises(DataError, match="x1..x2"):
            load_dataset_csv(path)

    def test_non_numeric_cell(self, tmp_path):
        path = _write(tmp_path, "r,t,y,x1\n1,1,2.0,abc\n")
        with pytest.raises(DataError, match="non-numeric"):
            load_dataset_csv(path)

    def test_treatment_label_column(self, tmp_path):
        path = _write(tmp_path, "r,t,y,rt,x1\n1,1,2.0,1,0.1\n1,,3.0,0,0.2\n0,0,,1,0.3\n")
        dataset = load_dataset_csv(path)
        assert dataset.treatment_label.tolist() == [1, 0, 1]
        assert dataset.outcome_label.tolist() == [1, 0, 0]
        assert np.isnan(dataset.treatment[1])

    def test_empty_treatment_without_rt(self, tmp_path):
        path = _write(tmp_path, "r,t,y,x1\n1,,2.0,0.1\n")
        with pytest.raises(DataError, match="no rt column"):
            load_dataset_csv(path)


class TestSaveDataset:
    def test_round_trip(self, tmp_path, make_dataset):
        dataset = make_dataset(n=60, d=4)
        loaded = load_dataset_csv(save_dataset_csv(dataset, tmp_path / "out.csv"))
        np.testing.assert_array_equal(loaded.covariates, dataset.covariates)
        np.testing.assert_array_equal(loaded.outcome_label, dataset.outcome_label)
        np.testing.assert_array_equal(loaded.outcome_values, dataset.outcome_values)

    def test_fit_is_unchanged_after_round_trip(self, tmp_path, make_dataset, fixed_learner):
        dataset = make_dataset(n=80, d=4)
        loaded = load_dataset_csv(save_dataset_csv(dataset, tmp_path / "out.csv"))
        train = np.arange(dataset.n)
        a = fit_or_lasso(dataset, 1, train, fixed_learner)
        b = fit_or_lasso(loaded, 1, train, fixed_learner)
        np.testing.assert_allclose(
            a.predictor(dataset.covariates), b.predictor(loaded.covariates), atol=1e-12
        )

    def test_needs_intercept(self, tmp_path, make_dataset):
        dataset = make_dataset(n=10)
        shifted = dataset.replace(covariates=dataset.covariates + 1.0)
        with pytest.raises(DataError, match="intercept"):
            save_dataset_csv(shifted, tmp_path / "out.csv")


class TestResults:
    def test_metadata_sidecar(self, tmp_path):
        meta = write_metadata({"seed": 3, "dgp": "a"}, tmp_path / "run.csv")
        assert meta.name == "run.meta.yml"
        assert yaml.safe_load(meta.read_text()) == {"seed": 3, "dgp": "a"}

    def test_report_csv(self, tmp_path, make_dataset, fixed_learner):
        report = estimate_ate("ss-lasso", make_dataset(n=120), tuning=fixed_learner, seed=1)
        path = write_report_csv(report, tmp_path / "report.csv", metadata={"seed": 1})
        frame = pd.read_csv(path)
        assert list(frame.columns)[:4] == ["mu_hat", "se", "ci_lo", "ci_hi"]
        assert frame.loc[0, "mu_hat"] == report.mu_hat
        assert (tmp_path / "report.meta.yml").exists()

    def test_metrics_csv(self, tmp_path):
        row = EstimatorMetrics(
            estimator="ss-lasso", bias=0.02, rmse=0.1, length=0.4,
            coverage=0.94, esd=0.1, asd=0.11, n_ok=200, n_fail=0,
        )
        table = MetricsTable(header="DGP (a)", mu0=6.0, n_reps=200, rows=[row])
        path = write_metrics_csv(table, tmp_path / "metrics.csv", metadata={"reps": 200})
        frame = pd.read_csv(path)
        assert frame.loc[0, "estimator"] == "ss-lasso"
        assert frame.loc[0, "coverage"] == 0.94
        meta = yaml.safe_load((tmp_path / "metrics.meta.yml").read_text())
        assert meta["reps"] == 200
        assert meta["valid"] is True


class TestLoadConfig:
    def test_yaml_mapping(self, tmp_path):
        path = _write(tmp_path, "n: 500\nlambda-policy: fixed\n", "run.yml")
        assert load_config(path) == {"n": 500, "lambda_policy": "fixed"}

    def test_key_value_lines(self, tmp_path):
        path = _write(tmp_path, "# study\nseed=3\nk-folds = 5\n", "run.cfg")
        assert load_config(path) == {"seed": "3", "k_folds": "5"}

    def test_bad_line(self, tmp_path):
        path = _write(tmp_path, "seed=3\njust words\n", "run.cfg")
        with pytest.raises(ValidationError, match="line 2"):
            load_config(path)

    def test_empty_file(self, tmp_path):
        assert load_config(_write(tmp_path, "", "run.cfg")) == {}
