import numpy as np
import pytest

from neumc import fields, geometry, pde


@pytest.fixture(scope="session")
def disk():
    return geometry.ball((0.0, 0.0), 1.0)


@pytest.fixture(scope="session")
def unit_box():
    return geometry.box((-1.0, -1.0), (1.0, 1.0))


@pytest.fixture(scope="session")
def killing_coeffs():
    """Identity diffusion with unit killing rate; the workhorse setting."""
    return fields.CoefficientSet(A=np.eye(2), Q=-1.0)


@pytest.fixture
def quick_cfg():
    """Small, fast Monte-Carlo settings for unit-level checks."""
    return pde.McConfig(n_paths=1500, dt=4e-3, t_max=8.0)
