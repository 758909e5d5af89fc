import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import HealthCheck, settings  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def park25():
    from patrolplan.park_env import ParkInstance, initial_wildlife

    return ParkInstance(25, 5, 5.0, initial_wildlife(25, "random", np.random.default_rng(0)))


@pytest.fixture
def strip2():
    from patrolplan.park_env import ParkInstance

    return ParkInstance(2, 1, 1.0, np.array([2.0, 2.0]), layout="strip")
