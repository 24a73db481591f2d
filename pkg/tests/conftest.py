import numpy as np
import pytest

from tactsense.core import SensorGeometry
from tactsense.photostereo import calibrate
from tactsense.simulator import default_illumination, generate_calibration_set, reference_frame


@pytest.fixture(scope="session")
def geometry():
    return SensorGeometry()


@pytest.fixture(scope="session")
def illum():
    return default_illumination()


@pytest.fixture(scope="session")
def flat_reference(illum, geometry):
    return reference_frame(illum, geometry)


@pytest.fixture(scope="session")
def calibration(illum, geometry, flat_reference):
    """Five 3 mm sphere presses and the table built from them."""
    samples = generate_calibration_set(3.0, 5, illum, geometry, depth=1.0, seed=1)
    table = calibrate([(s.image, s.center, s.contact_radius) for s in samples], flat_reference, geometry, 3.0)
    return samples, table


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
