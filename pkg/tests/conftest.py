"""
Shared fixtures: small intrinsics, icosphere priors and a frontal camera pose.
"""
import os

os.environ.setdefault("CACHE_ENABLED", "false")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from shape_tracker.geometry import Intrinsics, Pose  # noqa: E402
from shape_tracker.prior_shape import make_icosphere  # noqa: E402


@pytest.fixture
def k():
    return Intrinsics(fx=300.0, fy=300.0, cx=160.0, cy=120.0, width=320, height=240)


@pytest.fixture
def k_hd():
    return Intrinsics(fx=900.0, fy=900.0, cx=640.0, cy=360.0, width=1280, height=720)


@pytest.fixture
def sphere():
    return make_icosphere(subdivisions=3, radius=1.0)


@pytest.fixture
def front_pose():
    """Camera 4 units in front of the origin, optical axis along world +z."""
    return Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.0, 0.0, 4.0]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, angle=0.3, offset=0.3, depth=4.0):
    rotvec = rng.normal(size=3)
    rotvec *= rng.uniform(0, angle) / np.linalg.norm(rotvec)
    return Pose.from_rotvec(rotvec, np.array([*rng.uniform(-offset, offset, 2), depth]))


def small_spec(**updates):
    """A short, low-resolution fly-by around a unit icosphere."""
    from shape_tracker.simulator import ScenarioSpec

    data = {
        "n_frames": 40,
        "organ": {"kind": "icosphere", "subdivisions": 3},
        "organ_features": 250,
        "background": {"count": 150},
        "intrinsics": {"fx": 300.0, "fy": 300.0, "cx": 160.0, "cy": 120.0, "width": 320, "height": 240},
        "camera": {"waypoints": [{"eye": (0.0, 0.0, 4.0)}, {"eye": (0.4, 0.1, 3.9)}]},
        "noise": {"pixel_sigma": 0.5},
        "seed": 3,
    }
    data.update(updates)
    return ScenarioSpec.model_validate(data)
