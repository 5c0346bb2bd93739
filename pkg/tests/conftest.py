import numpy as np
import pytest

from mfjump.backward import CostSpec
from mfjump.flows import TimeGrid
from mfjump.model import Dist, band_background, constant_model, schlogl_first


@pytest.fixture(scope="session")
def schlogl_small():
    """Small birth/death preset used across the MC and solver tests."""
    nu = band_background(20, [1.0])
    model = schlogl_first(0.8, 0.1, 0.15, 0.01, nu)
    return model


@pytest.fixture(scope="session")
def grid_small():
    return TimeGrid(1.0, 200)


@pytest.fixture(scope="session")
def xi_small():
    return Dist.point(5, 20)


@pytest.fixture(scope="session")
def cost_small():
    states = np.arange(21, dtype=float)
    return CostSpec(
        f=lambda t, i, mu, u, v=None: 0.02 * i,
        h=lambda i, mu: 0.1 if i >= 8 else 0.0,
        f_bound=0.5,
        h_bound=0.1,
        f_rows=lambda t, mu, u_rows, v_rows=None: 0.02 * states,
    )


@pytest.fixture(scope="session")
def two_state():
    """Constant two-state chain, rates a: 0->1 and b: 1->0."""
    a, b = 0.7, 1.3
    return constant_model(np.array([[0.0, a], [b, 0.0]])), a, b
