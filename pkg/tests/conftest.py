from __future__ import annotations

import numpy as np
import pytest

from objslam.geometry import CameraIntrinsics, Pose, Quadric, so3_exp


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation from a normal rotation vector."""
    w = rng.normal(size=3)
    angle = rng.uniform(0.0, np.pi * 0.95)
    n = np.linalg.norm(w)
    if n < 1e-12:
        return np.eye(3)
    return so3_exp(w / n * angle)


def random_pose(rng: np.random.Generator, t_scale: float = 2.0) -> Pose:
    return Pose(random_rotation(rng), rng.normal(scale=t_scale, size=3))


def random_quadric(rng: np.random.Generator) -> Quadric:
    from objslam.geometry import matrix_to_euler_xyz

    theta = matrix_to_euler_xyz(random_rotation(rng))
    t = rng.normal(scale=1.5, size=3)
    s = rng.uniform(0.05, 0.6, size=3)
    return Quadric(theta, t, s)


@pytest.fixture
def camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)
