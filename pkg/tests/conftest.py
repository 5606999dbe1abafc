import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", parent=settings.get_profile("default"), max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def segmenter():
    from soilpick.config import Scenario, load_segmenter

    return load_segmenter(Scenario())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def flat_world(nx=32, ny=32, cell=0.01, z=0.0, material=0, origin=(0.0, 0.0)):
    from soilpick.terrain import TerrainGrid

    return TerrainGrid(cell, origin, np.full((nx, ny), z), np.full((nx, ny), material, dtype=np.int8),
                       np.full((nx, ny, 3), 0.4), z - 0.15)
