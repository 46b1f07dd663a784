import numpy as np
import pytest

from spicalib import calibration, twin
from spicalib.geometry import CameraIntrinsics, Pose, compose_projection


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_intrinsics(rng):
    f = rng.uniform(50, 400)
    return CameraIntrinsics(f, f * rng.uniform(0.8, 1.2), rng.uniform(-2, 2),
                            rng.uniform(40, 90), rng.uniform(40, 90))


def random_camera(rng, distance=150.0):
    """Camera looking at the origin region from ``distance`` mm."""
    R = random_rotation(rng)
    t = np.array([rng.uniform(-10, 10), rng.uniform(-10, 10), distance])
    return random_intrinsics(rng), Pose(R, t)


def random_rig(rng):
    """Camera matrix and full grating matrix observing points near the origin."""
    intr, pose = random_camera(rng)
    mp = compose_projection(intr, pose)
    # second device offset by a baseline and tilted towards the scene
    tilt = rng.uniform(0.1, 0.3)
    c, s = np.cos(tilt), np.sin(tilt)
    R2 = np.array([[1, 0, 0], [0, c, -s], [0, s, c]]) @ pose.R
    t2 = np.array([0.0, rng.uniform(20, 40), 0.0]) + np.array([[1, 0, 0], [0, c, -s], [0, s, c]]) @ pose.t
    ms_full = compose_projection(CameraIntrinsics(rng.uniform(80, 200), rng.uniform(80, 200),
                                                  0.0, rng.uniform(-5, 5), rng.uniform(-5, 5)),
                                 Pose(R2, t2))
    return mp, ms_full


@pytest.fixture(scope="session")
def scene():
    return twin.default_scene()


@pytest.fixture(scope="session")
def render_out(scene):
    return twin.render(scene, shifts=4)


@pytest.fixture(scope="session")
def calib(scene):
    return calibration.calibrate_scene(scene)
