import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from softmpc import studies


@pytest.fixture(scope="session")
def msd_design():
    """One shared offline design for the damped-oscillator studies."""
    return studies.design_msd()


@pytest.fixture(scope="session")
def fourtank_study():
    return studies.design_four_tank()


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


def random_schur(rng, n, rho_max=0.95):
    """Random Schur-stable matrix with spectral radius below rho_max."""
    A = rng.normal(size=(n, n))
    r = np.abs(np.linalg.eigvals(A)).max()
    return A * (rho_max * rng.uniform(0.2, 1.0) / r)
