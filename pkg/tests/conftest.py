import numpy as np
import pytest

from tinyovd.scenes import SplitSpec
from tinyovd.textspace import CategorySpace


@pytest.fixture(scope="session")
def split():
    s = SplitSpec.default()
    s.validate()
    return s


@pytest.fixture(scope="session")
def space(split):
    return CategorySpace.create(split.shapes, split.colors, d_text=32, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
