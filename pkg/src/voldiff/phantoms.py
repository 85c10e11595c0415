"""Synthetic test volumes with known structure, deterministic in their seed."""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError
from .field import DensityVolume

_KINDS = ("sphere", "shells", "blobs", "asymmetric")


def _node_grid(dims, box_min, box_max):
    axes = [
        box_min[a] + (np.arange(dims[a]) + 0.5) * (box_max[a] - box_min[a]) / dims[a]
        for a in range(3)
    ]
    return np.meshgrid(*axes, indexing="ij")


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def make_phantom(kind: str, dims, seed: int = 0, box_min=(-0.5, -0.5, -0.5),
                 box_max=(0.5, 0.5, 0.5)) -> DensityVolume:
    """Build one of the stock phantoms at the requested resolution.

    ``sphere``     centered ball of density 1 with a smooth falloff shell.
    ``shells``     two concentric density bands at different levels, which a
                   non-monotonic transfer function can tell apart.
    ``blobs``      seeded sum of Gaussian bumps.
    ``asymmetric`` blobs plus a one-sided spike that breaks view symmetry.
    """
    if kind not in _KINDS:
        raise InvalidParameterError(f"unknown phantom kind {kind!r}")
    if isinstance(dims, int):
        dims = (dims, dims, dims)
    dims = tuple(int(d) for d in dims)
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    x, y, z = _node_grid(dims, box_min, box_max)
    center = 0.5 * (box_min + box_max)
    half = float(np.min(0.5 * (box_max - box_min)))
    r = np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2)

    if kind == "sphere":
        r0, r1 = 0.45 * half, 0.85 * half
        d = 1.0 - _smoothstep((r - r0) / (r1 - r0))
    elif kind == "shells":
        d = (
            0.85 * np.exp(-(((r - 0.32 * half) / (0.11 * half)) ** 2))
            + 0.45 * np.exp(-(((r - 0.70 * half) / (0.11 * half)) ** 2))
        )
    else:
        rng = np.random.default_rng(seed)
        d = np.zeros(dims)
        for _ in range(6):
            c = center + rng.uniform(-0.55, 0.55, 3) * half
            sigma = rng.uniform(0.16, 0.38) * half
            amp = rng.uniform(0.4, 1.0)
            d += amp * np.exp(
                -(((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) / (2 * sigma * sigma))
            )
        if kind == "asymmetric":
            c = center + np.array([0.62, 0.18, -0.10]) * half
            sigma = 0.14 * half
            d += 1.2 * np.exp(
                -(((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) / (2 * sigma * sigma))
            )
    return DensityVolume(np.clip(d, 0.0, 1.0), box_min, box_max)
