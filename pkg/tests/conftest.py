"""Shared fixtures for skdmar tests."""

import numpy as np
import pytest

from skdmar.models import Dataset, DgpSpec, LambdaPolicy, LearnerSpec, SolverConfig
from skdmar.simulate import build_oracle, gen_dataset


@pytest.fixture
def make_dataset():
    """Factory for small linear datasets with MAR labels.

    Outcomes are y = 1 + 2t + x'slope + noise; labels are drawn with
    probability ``label_rate`` independently of everything else.
    """

    def factory(n=200, d=4, seed=0, label_rate=0.5, noise=1.0):
        rng = np.random.default_rng(seed)
        X = np.column_stack([np.ones(n), rng.standard_normal((n, d - 1))])
        t = np.tile([1.0, 0.0], n // 2 + 1)[:n]
        slope = np.linspace(1.0, 0.2, d - 1)
        y = 1.0 + 2.0 * t + X[:, 1:] @ slope + noise * rng.standard_normal(n)
        r = (rng.random(n) < label_rate).astype(int)
        r[:4] = 1
        return Dataset(
            covariates=X,
            outcome_label=r,
            treatment=t,
            outcome_values=np.where(r == 1, y, np.nan),
        )

    return factory


@pytest.fixture
def fixed_learner():
    """Fixed small penalties so fits are fast and deterministic."""
    return LearnerSpec(
        lambda_policy=LambdaPolicy.fixed(0.02, 0.01),
        solver=SolverConfig(tol=1e-8),
    )


@pytest.fixture(scope="session")
def design_a():
    """DGP (a) at N=1000, d=11 and a 0.2 labeling rate, with its oracle."""
    spec = DgpSpec(dgp="a", n=1000, d=11, gamma_target=0.2, seed=3)
    oracle = build_oracle(spec, mc_draws=200_000, truth_draws=1)
    return spec, oracle


@pytest.fixture
def draw_a(design_a):
    spec, oracle = design_a
    return gen_dataset(spec, oracle, np.random.default_rng(11))
