import numpy as np
import pytest

import mvfluid as mv
from mvfluid.presets import make_rng


@pytest.fixture()
def grid16():
    return mv.Grid(16, 16, 1.0, 1.0)


@pytest.fixture()
def grid32():
    return mv.Grid(32, 32, 1.0, 1.0)


@pytest.fixture()
def rng():
    return make_rng(12345)


@pytest.fixture()
def params():
    return mv.PhysParams(nu=1.0, kappa=1.0, alpha=1.0)


def zero_controls(grid, n):
    return [mv.zero_field(grid, 3, mv.BC_NEUMANN) for _ in range(n)]


def constant_controls(grid, vec, n):
    vals = np.zeros((3,) + grid.shape)
    for c in range(3):
        vals[c] = vec[c]
    return [mv.Field(grid, vals.copy(), mv.BC_NEUMANN) for _ in range(n)]
