import numpy as np
import pytest

from csg3dct.tensor import default_dtype


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")
