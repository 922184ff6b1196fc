import numpy as np
import pytest

from gradvi import Grid

SEED = 20240901


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)


@pytest.fixture
def line():
    return Grid.interval(-1.0, 1.0, 41)


@pytest.fixture
def square():
    return Grid.box((0.0, 1.0), (0.0, 1.0), 13, 13)


def interior_noise(grid, rng, scale=1.0):
    u = np.zeros(grid.shape)
    u.ravel()[grid.interior_flat] = scale * rng.standard_normal(grid.n_interior)
    return u
