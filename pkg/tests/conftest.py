import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from asym_lab.numerics import RngStream

settings.register_profile("lab", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


@pytest.fixture
def rng():
    return RngStream(1234, ("tests",))


def pytest_collection_modifyitems(config, items):
    if os.environ.get("ASYM_LAB_FULL_MATRIX") == "1":
        return
    skip = pytest.mark.skip(reason="set ASYM_LAB_FULL_MATRIX=1 to run the full placement matrix")
    for item in items:
        if "full_matrix" in item.keywords:
            item.add_marker(skip)

