from __future__ import annotations

import numpy as np
import pytest

from linkreg import CovariateLevel, ScenarioConfig

TWO_LEVELS = (
    CovariateLevel(values=(1.0, 1.0), weight=0.5),
    CovariateLevel(values=(1.0, -1.0), weight=0.5),
)


def standard_scenario(**overrides) -> ScenarioConfig:
    """The benchmark scenario used throughout the suite: two
    equiprobable covariate levels (1, +/-1), slope 1, constant match
    rate 0.8, half the links reviewed."""
    params = dict(
        n=10_000,
        beta_true=(-0.5, 1.0),
        covariate_levels=TWO_LEVELS,
        match_model=0.8,
        mismatch_response_model="population-marginal",
        review_probability=0.5,
        seed=20260810,
    )
    params.update(overrides)
    return ScenarioConfig(**params)


@pytest.fixture
def scenario():
    return standard_scenario()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
