import os

import hypothesis
import numpy as np
import pytest

from skeletal_radiance.dataset import generate_captures
from skeletal_radiance.gradcheck import TINY_FIELD
from skeletal_radiance.tensor import default_dtype

hypothesis.settings.register_profile("ci", deadline=None, max_examples=50)
hypothesis.settings.register_profile("dev", deadline=None, max_examples=25)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "dev"))


@pytest.fixture
def float64():
    with default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_captures():
    """2 subjects x 4 frames x 4 views at 16x16; inputs are views 0-2, view 3 is held out"""
    return generate_captures(seed=0, subjects=2, frames=4, views=4, resolution=16)


@pytest.fixture
def tiny_config():
    return TINY_FIELD


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
