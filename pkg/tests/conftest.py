import numpy as np
import pytest

from gixtrack.geometry import ExperimentGeometry


@pytest.fixture
def use_case_geom():
    """Quadrant setup of the 18 keV / 0.5 degree measurement series."""
    return ExperimentGeometry(
        photon_energy_kev=18.0,
        incidence_deg=0.5,
        distance_mm=150.0,
        pixel_mm=0.075,
        beam_center_px=(30.0, 20.0),
        detector_shape=(600, 800),
    )


def gaussian_spot(shape, center, sigma, amplitude=1.0):
    """(row, col)-centered Gaussian test blob."""
    rows = np.arange(shape[0], dtype=float)[:, None]
    cols = np.arange(shape[1], dtype=float)[None, :]
    return amplitude * np.exp(
        -((rows - center[0]) ** 2 + (cols - center[1]) ** 2) / (2.0 * sigma**2)
    )
