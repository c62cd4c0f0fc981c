import numpy as np
import pytest

from lanebev import tensor as T


@pytest.fixture(autouse=True)
def _debug_checks():
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
