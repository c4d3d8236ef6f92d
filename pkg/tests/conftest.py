from __future__ import annotations

import csv
import io
from typing import Callable

import numpy as np
import pytest

from startup_options.params import ModelParams

COMMON = {
    "mu": 0.03,
    "sigma": 0.2,
    "rho": 0.05,
    "cost_slope": 0.1,
    "cost_intercept": 0.1,
    "cap_k": 10.0,
    "lambda1": 0.1,
    "lambda2": 0.2,
    "beta": 7.0,
}
# 2(rho - mu) > sigma^2, so simulated NPVs have finite variance
TAME = {**COMMON, "mu": 0.02, "rho": 0.10, "alpha": 0.6}
# same market with low post-competition profit: case II, and entry happens below a~*
TAME_CASE_TWO = {**TAME, "alpha": 0.2}


@pytest.fixture
def case_one() -> ModelParams:
    return ModelParams.from_flat({**COMMON, "alpha": 0.6})


@pytest.fixture
def case_two() -> ModelParams:
    return ModelParams.from_flat({**COMMON, "alpha": 0.3})


@pytest.fixture
def tame() -> ModelParams:
    return ModelParams.from_flat(TAME)


@pytest.fixture
def tame_case_two() -> ModelParams:
    return ModelParams.from_flat(TAME_CASE_TWO)


@pytest.fixture
def make_params() -> Callable[..., ModelParams]:
    def build(**overrides: float) -> ModelParams:
        return ModelParams.from_flat({**COMMON, "alpha": 0.6, **overrides})

    return build


def random_params(seed: int, *, k_above_beta: bool | None = None, sigma: tuple[float, float] = (0.1, 0.3)) -> ModelParams:
    rng = np.random.default_rng(seed)
    mu = rng.uniform(0.01, 0.04)
    beta = rng.uniform(3.0, 10.0)
    if k_above_beta is None:
        cap_k = rng.uniform(3.0, 12.0)
    elif k_above_beta:
        cap_k = beta * rng.uniform(1.05, 1.5)
    else:
        cap_k = beta * rng.uniform(0.6, 0.95)
    return ModelParams.from_flat(
        {
            "mu": mu,
            "sigma": rng.uniform(*sigma),
            "rho": mu + rng.uniform(0.02, 0.08),
            "alpha": rng.uniform(0.1, 1.0),
            "beta": beta,
            "cap_k": cap_k,
            "cost_slope": rng.uniform(0.05, 0.3),
            "cost_intercept": rng.uniform(0.05, 0.5),
            "lambda1": rng.uniform(0.01, 1.0),
            "lambda2": rng.uniform(0.01, 1.0),
        }
    )


def read_csv_records(text: str) -> tuple[list[str], list[dict[str, str]]]:
    reader = csv.DictReader(io.StringIO(text))
    return list(reader.fieldnames or []), list(reader)


@pytest.fixture
def random_param_sets() -> list[ModelParams]:
    return [random_params(seed) for seed in range(12)]
