"""Shared fixtures and numeric helpers for the test suite."""

import numpy as np
import pytest

from voldiff.field import DensityVolume, SphericalCamera, TransferFunction


def central_diff(f, x0, h):
    """Scalar central finite difference."""
    return (f(x0 + h) - f(x0 - h)) / (2.0 * h)


def rel_err(a, b, floor=1e-12):
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    return float(np.max(np.abs(a - b))) / max(float(np.max(np.abs(b))), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_volume(rng):
    return DensityVolume(rng.uniform(0.15, 0.85, (8, 8, 8)))


@pytest.fixture
def small_tf(rng):
    texels = np.column_stack([
        rng.uniform(0.05, 1.0, (8, 3)),
        rng.uniform(0.3, 2.0, 8),
    ])
    return TransferFunction(texels)


@pytest.fixture
def small_camera():
    return SphericalCamera(33.0, 21.0, 2.4, fov_y_deg=35.0, width=8, height=8)
