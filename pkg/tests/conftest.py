import numpy as np
import pytest

from maot.fe_space import build_space
from maot.mesh import triangulate_disk, triangulate_square


@pytest.fixture(scope="session")
def disk_l2_k1():
    return build_space(triangulate_disk(2), 1)


@pytest.fixture(scope="session")
def disk_l2_k2():
    return build_space(triangulate_disk(2), 2)


@pytest.fixture(scope="session")
def square_n8_k1():
    return build_space(triangulate_square(8), 1)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260816)
