import sys
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cloudcarve.volume import DensityGrid, GridDomain

warnings.filterwarnings("ignore", message=".*TBB.*")

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def small_domain():
    return GridDomain(origin=(0.0, 0.0, 0.0), voxel_size=50.0, dims=(24, 20, 12))


@pytest.fixture
def coarse_domain():
    """10 km x 10 km x 3.6 km at 200 m: the default extent at a test-friendly resolution."""
    return GridDomain(origin=(-5000.0, -5000.0, 400.0), voxel_size=200.0, dims=(51, 51, 19))


def blob(domain: GridDomain, center, radius: float, peak: float = 0.05) -> DensityGrid:
    c = domain.centers().reshape(*domain.dims, 3)
    r2 = np.sum((c - np.asarray(center)) ** 2, axis=-1)
    return DensityGrid(domain, peak * np.exp(-r2 / (2 * radius**2)))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
