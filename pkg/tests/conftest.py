import numpy as np
import pytest

from thyrovol.phantom import PhantomSpec, build_phantom


@pytest.fixture(scope="session")
def default_model():
    return build_phantom(PhantomSpec())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
