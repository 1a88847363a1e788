import numpy as np
import pytest

from dmleval.data import SyntheticSpec, assign_folds, generate_synthetic
from dmleval.nuisance import crossfit
from dmleval.smoother import ForestParams

SMALL = ForestParams(num_trees=40)
SMALL_PROP = ForestParams(num_trees=40, min_leaf=10)


@pytest.fixture(scope="session")
def small_data():
    ds, truth = generate_synthetic(SyntheticSpec(n=800), seed=11)
    return ds, truth


@pytest.fixture(scope="session")
def small_nuisance(small_data):
    ds, _ = small_data
    folds = assign_folds(ds, 5, seed=0)
    return crossfit(ds, folds, SMALL, propensity_params=SMALL_PROP)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
