import numpy as np
import pytest
from hypothesis import settings, strategies as st

from lcfusion.geometry import CameraIntrinsics, Pose

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

finite = dict(allow_nan=False, allow_infinity=False)


@st.composite
def poses(draw, max_angle=3.0, max_t=5.0):
    axis = np.array(draw(st.lists(st.floats(-1, 1, **finite), min_size=3, max_size=3)))
    n = np.linalg.norm(axis)
    axis = axis / n if n > 1e-3 else np.array([0.0, 0.0, 1.0])
    angle = draw(st.floats(0.0, max_angle, **finite))
    t = draw(st.lists(st.floats(-max_t, max_t, **finite), min_size=3, max_size=3))
    return Pose.from_rotvec(axis * angle, t)


def vec3(lo=-5.0, hi=5.0):
    return st.lists(st.floats(lo, hi, **finite), min_size=3, max_size=3).map(np.array)


def rz(deg, t=(0.0, 0.0, 0.0)):
    return Pose.from_rotvec([0.0, 0.0, np.radians(deg)], t)


@pytest.fixture
def K100():
    return CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 0.38)


def random_pose(rng, angle=1.0, trans=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose.from_rotvec(axis * rng.uniform(0, angle), rng.uniform(-trans, trans, 3))
