import numpy as np
import pytest

from epifuse.geometry import CameraModel
from epifuse.synthdata import look_at


def random_camera(rng, size=(640, 480), distance=(3.0, 6.0)) -> CameraModel:
    """Camera on a random sphere point looking roughly at the origin."""
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    C = d * rng.uniform(*distance)
    target = rng.uniform(-0.3, 0.3, size=3)
    # avoid a degenerate up vector for near-vertical viewing directions
    up = (0.0, 0.0, 1.0) if abs(d[2]) < 0.9 else (0.0, 1.0, 0.0)
    R = look_at(C, target, up)
    f = rng.uniform(300.0, 800.0)
    w, h = size
    K = np.array([[f, rng.uniform(-1, 1), w / 2 + rng.uniform(-20, 20)], [0.0, f * rng.uniform(0.95, 1.05), h / 2 + rng.uniform(-20, 20)], [0.0, 0.0, 1.0]])
    return CameraModel(K, R, -R @ C, size)


def random_points(rng, n, radius=1.0):
    return rng.uniform(-radius, radius, size=(n, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
