import numpy as np
import pytest

from nrhosk.baseline import refine_baseline
from nrhosk.constants import load_constants
from nrhosk.cr3bp import find_nrho_by_period
from nrhosk.dynamics import default_model
from nrhosk.propagation import IntegratorConfig


@pytest.fixture(scope="session")
def constants():
    return load_constants()


@pytest.fixture(scope="session")
def model():
    """Full force model with packaged constants."""
    return default_model()


@pytest.fixture(scope="session")
def kepler_model():
    """Two-body-only variant of the same model."""
    return default_model(include_j2=False, include_earth=False,
                         include_sun=False, include_srp=False)


@pytest.fixture(scope="session")
def nrho_orbit(constants):
    """Restricted-problem member matching the 9:2 synodic resonance."""
    mass_ratio = 1.0 / (1.0 + constants.earth_moon_mass_ratio)
    period_nd = (2.0 / 9.0) * constants.synodic_period() * constants.earth_orbit.mean_motion
    return find_nrho_by_period(mass_ratio, period_nd)


@pytest.fixture(scope="session")
def small_baseline(nrho_orbit, model):
    """Refined 12-revolution reference orbit shared across test modules."""
    return refine_baseline(nrho_orbit, 12, IntegratorConfig(), model)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240613)
