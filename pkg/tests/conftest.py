import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from corrpose.geometry import Intrinsics, Pose
from corrpose.meshes import make_cube, make_icosphere, make_l_bracket

settings.register_profile(
    "corrpose", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("corrpose")


@pytest.fixture(scope="session")
def cube():
    return make_cube()


@pytest.fixture(scope="session")
def icosphere():
    return make_icosphere()


@pytest.fixture(scope="session")
def bracket():
    return make_l_bracket()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def k224():
    return Intrinsics(320.0, 320.0, 112.0, 112.0)


def random_pose(rng, z=0.5, spread=0.02):
    return Pose.from_rotvec(rng.normal(size=3), [rng.normal(0, spread), rng.normal(0, spread), z])
