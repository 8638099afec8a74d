import os

import numpy as np
import pytest

from sgl.sde import ou
from sgl.targets import symmetric_mixture


TEST_DIR = os.path.dirname(__file__)

SAMPLE_DIR = os.path.join(os.path.dirname(TEST_DIR), "sample")


@pytest.fixture
def sde():
    return ou(3.0)


@pytest.fixture
def bimodal():
    return symmetric_mixture(3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
