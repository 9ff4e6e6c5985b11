import numpy as np
import pytest

from actionloc.tensor import precision


@pytest.fixture
def double():
    with precision("double"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
