import numpy as np
import pytest

from saleak.nn import cnn_bn, fcn3


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_fcn(rng):
    return fcn3(12, 5, (10, 8), rng)


@pytest.fixture
def small_cnn(rng):
    return cnn_bn((1, 6, 6), 5, channels=3, kernel=3, hidden=9, rng=rng)
