import numpy as np
import pytest

from coaghom.geometry import build_cell_geometry, mesh_cell

DISK = {"type": "disk", "center": [0.5, 0.5], "radius": 0.25}


@pytest.fixture(scope="session")
def disk():
    return build_cell_geometry(DISK)


@pytest.fixture(scope="session")
def disk_meshes(disk):
    return mesh_cell(disk, 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
