import numpy as np
import pytest

from hedgelab import market


@pytest.fixture(scope="session")
def params():
    return market.DEFAULT_PARAMS


@pytest.fixture(scope="session")
def small_p_paths(params):
    return market.simulate_p(params, 100.0, market.DEFAULT_SIGMA1, 21, 4000, seed=31)


@pytest.fixture(scope="session")
def tiny_p_paths(params):
    return market.simulate_p(params, 100.0, market.DEFAULT_SIGMA1, 5, 64, seed=32)
