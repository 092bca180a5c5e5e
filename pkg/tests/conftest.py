import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from contactest.geometry import DiskSdf, RectangleSdf, SdfNet
from contactest.simulator import SimConfig, Simulator

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "fixtures")
WEIGHTS_PATH = os.path.join(FIXTURE_DIR, "corpus21.sdf2")

# theta layout: z1 z2 tx tz tphi s mu gh pw
THETA_DISK_FLOOR = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.3, 0.0, 10.0])


@pytest.fixture(scope="session")
def disk_sim():
    return Simulator(DiskSdf(0.05), SimConfig())


@pytest.fixture(scope="session")
def square_sim():
    return Simulator(RectangleSdf(0.04, 0.04), SimConfig())


@pytest.fixture(scope="session")
def trained_net():
    if not os.path.exists(WEIGHTS_PATH):
        pytest.skip("trained weight fixture not generated yet")
    return SdfNet.load(WEIGHTS_PATH)
