import numpy as np
import pytest

from mtsb import analysis, singular
from mtsb.model import CellParams

# published PSP at G = 8 (v, x, y, z)
PUBLISHED_PSP = (-60.4, 0.094, 0.467, 84.539)


@pytest.fixture(scope="session")
def params():
    return CellParams()


@pytest.fixture(scope="session")
def psp8(params):
    return singular.find_psp(params)


@pytest.fixture(scope="session")
def traj8(params):
    """Converged G = 8 run, 80 min, full state."""
    return analysis.simulate_cell(params, 80.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
