"""Shared fixtures and small random-geometry helpers."""

from __future__ import annotations

import numpy as np
import pytest

from warpworld.geometry import CameraPose, Intrinsics, Trajectory, nearest_rotation


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] *= -1
    return q


def random_pose(rng: np.random.Generator, t_scale: float = 2.0) -> CameraPose:
    return CameraPose(random_rotation(rng), rng.normal(scale=t_scale, size=3))


def random_trajectory(rng: np.random.Generator, n: int) -> Trajectory:
    return Trajectory([random_pose(rng) for _ in range(n)])


@pytest.fixture
def rng():
    return np.random.default_rng(20260819)


@pytest.fixture
def toy_intrinsics():
    return Intrinsics(fx=61.5, fy=61.5, cx=31.5, cy=31.5, width=64, height=64)
