"""Scalar-field, transfer-function and camera primitives with their derivatives.

Conventions used throughout:

* Volume values live at voxel centers: node ``(i, j, k)`` sits at
  ``box_min + (i + 0.5) * voxel_size``.  Sampling clamps to the edge nodes
  inside the box and returns 0 outside it.
* Transfer-function texel ``r`` has its center at ``(r + 0.5) / R`` with
  linear interpolation between centers and clamp-to-edge beyond them, which
  mirrors 1D texture hardware.
* Angles are degrees externally; all gradients are reported per degree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .errors import InvalidParameterError

EPS_POLE_DEG = 1e-3
EPS_ALPHA = 1e-6

_DEG = math.pi / 180.0


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class DensityVolume:
    """3D scalar grid with a world-space box.

    ``values`` has shape (X, Y, Z).  Densities are semantically in [0, 1];
    out-of-range values may appear transiently during optimization and are
    clamped at sampling time.
    """

    values: np.ndarray
    box_min: np.ndarray = dc_field(default_factory=lambda: np.array([-0.5, -0.5, -0.5]))
    box_max: np.ndarray = dc_field(default_factory=lambda: np.array([0.5, 0.5, 0.5]))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.box_min = np.asarray(self.box_min, dtype=np.float64).reshape(3)
        self.box_max = np.asarray(self.box_max, dtype=np.float64).reshape(3)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise InvalidParameterError("volume values must be a non-empty 3D array")
        if not np.all(np.isfinite(self.values)):
            raise InvalidParameterError("volume contains non-finite densities")
        if not np.all(self.box_max > self.box_min):
            raise InvalidParameterError("world box must have positive extent on each axis")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def extent(self) -> np.ndarray:
        return self.box_max - self.box_min

    @property
    def voxel_size(self) -> np.ndarray:
        return self.extent / np.asarray(self.values.shape, dtype=np.float64)

    def node_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World coordinates of the voxel centers, one 1D array per axis."""
        vs = self.voxel_size
        return tuple(
            self.box_min[a] + (np.arange(self.values.shape[a]) + 0.5) * vs[a]
            for a in range(3)
        )


@dataclass
class ColorVolume:
    """Per-voxel rgb emission plus absorption, shape (X, Y, Z, 4)."""

    values: np.ndarray
    box_min: np.ndarray = dc_field(default_factory=lambda: np.array([-0.5, -0.5, -0.5]))
    box_max: np.ndarray = dc_field(default_factory=lambda: np.array([0.5, 0.5, 0.5]))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.box_min = np.asarray(self.box_min, dtype=np.float64).reshape(3)
        self.box_max = np.asarray(self.box_max, dtype=np.float64).reshape(3)
        if self.values.ndim != 4 or self.values.shape[3] != 4:
            raise InvalidParameterError("color volume must have shape (X, Y, Z, 4)")
        if not np.all(np.isfinite(self.values)):
            raise InvalidParameterError("color volume contains non-finite entries")
        if not np.all(self.box_max > self.box_min):
            raise InvalidParameterError("world box must have positive extent on each axis")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape[:3]

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.box_max - self.box_min) / np.asarray(self.values.shape[:3], dtype=np.float64)


@dataclass
class TransferFunction:
    """R texels of (r, g, b emission, tau absorption) with linear interpolation.

    Entries must be finite; negative values may appear transiently while an
    optimizer proposes updates and are removed by the projection step.
    """

    texels: np.ndarray

    def __post_init__(self):
        self.texels = np.asarray(self.texels, dtype=np.float64)
        if self.texels.ndim != 2 or self.texels.shape[1] != 4 or self.texels.shape[0] < 1:
            raise InvalidParameterError("transfer function must have shape (R, 4), R >= 1")
        if not np.all(np.isfinite(self.texels)):
            raise InvalidParameterError("transfer function contains non-finite entries")

    @property
    def resolution(self) -> int:
        return self.texels.shape[0]


@dataclass
class SphericalCamera:
    """Camera on a sphere around ``center``, looking at it, up is world +Y."""

    lon_deg: float
    lat_deg: float
    radius: float
    center: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    fov_y_deg: float = 30.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        self.lon_deg = float(self.lon_deg) % 360.0
        self.lat_deg = float(self.lat_deg)
        self.radius = float(self.radius)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if abs(self.lat_deg) >= 90.0 - EPS_POLE_DEG:
            raise InvalidParameterError(
                f"latitude {self.lat_deg} deg violates the pole exclusion"
            )
        if self.radius <= 0.0:
            raise InvalidParameterError("camera radius must be positive")
        if not 0.0 < self.fov_y_deg < 180.0:
            raise InvalidParameterError("vertical field of view must be in (0, 180)")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be at least 1x1")


@dataclass
class Ray:
    """Arc-length parameterized ray r(t) = origin + t * direction."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = math.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-6:
            raise InvalidParameterError("ray direction must be unit length")
        if self.t_near > self.t_far:
            raise InvalidParameterError("t_near must not exceed t_far")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------


def _camera_rays(lon_deg, lat_deg, cam: SphericalCamera, u, v):
    """Eye position and per-pixel unit directions.

    ``lon_deg``/``lat_deg`` may be Duals; ``u``/``v`` are pixel indices (the
    ray passes through the pixel center).  Returns component tuples
    ``(ox, oy, oz), (dx, dy, dz)`` where origin entries are scalars and
    direction entries match the shape of ``u``.
    """
    lon = lon_deg * _DEG
    lat = lat_deg * _DEG
    cl, sl = ad.cos(lat), ad.sin(lat)
    cp, sp = ad.cos(lon), ad.sin(lon)

    ox = cam.center[0] + cam.radius * (cl * cp)
    oy = cam.center[1] + cam.radius * sl
    oz = cam.center[2] + cam.radius * (cl * sp)

    # view axis toward the center; unit up to rounding, normalized anyway
    fx, fy, fz = -(cl * cp), -sl, -(cl * sp)
    fn = ad.sqrt(fx * fx + fy * fy + fz * fz)
    fx, fy, fz = fx / fn, fy / fn, fz / fn

    # right = normalize(forward x worldUp), worldUp = +Y; its y component is 0
    rx, rz = -fz, fx
    rn = ad.sqrt(rx * rx + rz * rz)
    rx, rz = rx / rn, rz / rn

    # image up = right x forward
    ux = -(rz * fy)
    uy = rz * fx - rx * fz
    uz = rx * fy

    th = math.tan(0.5 * cam.fov_y_deg * _DEG)
    su = ((np.asarray(u, dtype=np.float64) + 0.5) * (2.0 / cam.width) - 1.0) * th * (
        cam.width / cam.height
    )
    sv = (1.0 - (np.asarray(v, dtype=np.float64) + 0.5) * (2.0 / cam.height)) * th

    dx = fx + rx * su + ux * sv
    dy = fy + uy * sv
    dz = fz + rz * su + uz * sv
    dn = ad.sqrt(dx * dx + dy * dy + dz * dz)
    return (ox, oy, oz), (dx / dn, dy / dn, dz / dn)


def _check_uv(cam: SphericalCamera, u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= cam.width) or np.any(v < 0) or np.any(v >= cam.height):
        raise InvalidParameterError("pixel coordinates outside image bounds")
    return u, v


def camera_from_sphere(cam: SphericalCamera, u, v):
    """Ray origin and unit direction through the center of pixel (u, v).

    ``u`` indexes columns and ``v`` rows; both may be arrays.  Returns
    ``(origin, direction)`` with trailing axis 3, origin broadcast to the
    pixel shape.
    """
    u, v = _check_uv(cam, u, v)
    o3, d3 = _camera_rays(cam.lon_deg, cam.lat_deg, cam, u, v)
    direction = np.stack([np.broadcast_to(c, u.shape) for c in d3], axis=-1)
    origin = np.broadcast_to(np.array(o3, dtype=np.float64), u.shape + (3,))
    return origin, direction


def camera_gradients(cam: SphericalCamera, u, v):
    """Jacobians of (origin, direction) with respect to (lon, lat) in degrees.

    Evaluates the camera parameterization over dual numbers, which yields the
    analytic derivative of every intermediate step including the direction
    normalization.  Returns ``(j_origin, j_direction)`` with trailing axes
    (3, 2); the origin Jacobian is identical for every pixel.
    """
    u, v = _check_uv(cam, u, v)
    lon = ad.Dual.seed(cam.lon_deg, 0, 2)
    lat = ad.Dual.seed(cam.lat_deg, 1, 2)
    o3, d3 = _camera_rays(lon, lat, cam, u, v)
    j_origin = np.stack([c.der for c in o3], axis=0)  # (3, 2)
    j_origin = np.broadcast_to(j_origin, u.shape + (3, 2))
    j_dir = np.stack(
        [np.moveaxis(np.broadcast_to(c.der, (2,) + u.shape), 0, -1) for c in d3],
        axis=-2,
    )
    return j_origin, j_dir


# ---------------------------------------------------------------------------
# trilinear volume sampling
# ---------------------------------------------------------------------------


def _grid_setup(dims, box_min, box_max, x, y, z):
    """Clamped grid coordinates, corner indices and inside-box mask.

    The inside test carries a relative tolerance so ray samples computed to
    land exactly on a box face stay inside under floating-point slop; the
    sampled field would otherwise be discontinuous at every ray entry point.
    """
    X, Y, Z = dims
    sx = X / (box_max[0] - box_min[0])
    sy = Y / (box_max[1] - box_min[1])
    sz = Z / (box_max[2] - box_min[2])
    gx = (x - box_min[0]) * sx - 0.5
    gy = (y - box_min[1]) * sy - 0.5
    gz = (z - box_min[2]) * sz - 0.5
    tol = 1e-9 * (box_max - box_min)
    inside = (
        (ad.value_of(x) >= box_min[0] - tol[0]) & (ad.value_of(x) <= box_max[0] + tol[0])
        & (ad.value_of(y) >= box_min[1] - tol[1]) & (ad.value_of(y) <= box_max[1] + tol[1])
        & (ad.value_of(z) >= box_min[2] - tol[2]) & (ad.value_of(z) <= box_max[2] + tol[2])
    )
    gcx = ad.clip(gx, 0.0, float(X - 1))
    gcy = ad.clip(gy, 0.0, float(Y - 1))
    gcz = ad.clip(gz, 0.0, float(Z - 1))
    ix = np.clip(np.floor(ad.value_of(gcx)).astype(np.intp), 0, max(X - 2, 0))
    iy = np.clip(np.floor(ad.value_of(gcy)).astype(np.intp), 0, max(Y - 2, 0))
    iz = np.clip(np.floor(ad.value_of(gcz)).astype(np.intp), 0, max(Z - 2, 0))
    fx = gcx - ix
    fy = gcy - iy
    fz = gcz - iz
    return (gx, gy, gz), (gcx, gcy, gcz), (ix, iy, iz), (fx, fy, fz), inside


def _corner_indices(dims, ix, iy, iz):
    """Flat indices of the 8 cell corners in C order, shape (..., 8)."""
    X, Y, Z = dims
    jx = np.minimum(ix + 1, X - 1)
    jy = np.minimum(iy + 1, Y - 1)
    jz = np.minimum(iz + 1, Z - 1)
    base = lambda a, b, c: (a * Y + b) * Z + c
    return np.stack(
        [
            base(ix, iy, iz), base(jx, iy, iz), base(ix, jy, iz), base(jx, jy, iz),
            base(ix, iy, jz), base(jx, iy, jz), base(ix, jy, jz), base(jx, jy, jz),
        ],
        axis=-1,
    )


def _corner_weights(fx, fy, fz):
    """Trilinear weights matching the corner order of _corner_indices."""
    ex, ey, ez = 1.0 - fx, 1.0 - fy, 1.0 - fz
    return (
        ex * ey * ez, fx * ey * ez, ex * fy * ez, fx * fy * ez,
        ex * ey * fz, fx * ey * fz, ex * fy * fz, fx * fy * fz,
    )


def _trilinear(values, box_min, box_max, x, y, z, clamp01=True):
    """Trilinear interpolation; inputs may be Duals (spatially differentiable)."""
    dims = values.shape
    _, _, idx, fracs, inside = _grid_setup(dims, box_min, box_max, x, y, z)
    corners = _corner_indices(dims, *idx)
    flat = values.reshape(-1)
    weights = _corner_weights(*fracs)
    out = weights[0] * flat[corners[..., 0]]
    for c in range(1, 8):
        out = out + weights[c] * flat[corners[..., c]]
    out = ad.where(inside, out, 0.0)
    if clamp01:
        out = ad.clip(out, 0.0, 1.0)
    return out


def trilinear_sample(volume: DensityVolume, points) -> np.ndarray:
    """Density at world points, 0 outside the box, clamped to [0, 1]."""
    pts = np.asarray(points, dtype=np.float64)
    return _trilinear(
        volume.values, volume.box_min, volume.box_max,
        pts[..., 0], pts[..., 1], pts[..., 2],
    )


def _trilinear_multi(values, box_min, box_max, x, y, z):
    """Channel-fused trilinear lookup for (X, Y, Z, C) grids, plain arrays.

    Accumulates corners in the same order as :func:`_trilinear`, so values
    agree bitwise with per-channel evaluation.
    """
    dims = values.shape[:3]
    _, _, idx, fracs, inside = _grid_setup(dims, box_min, box_max, x, y, z)
    corners = _corner_indices(dims, *idx)
    flat = values.reshape(-1, values.shape[3])
    v = flat[corners]  # (..., 8, C)
    wts = _corner_weights(*fracs)
    out = wts[0][..., None] * v[..., 0, :]
    for c in range(1, 8):
        out = out + wts[c][..., None] * v[..., c, :]
    return np.where(inside[..., None], out, 0.0)


def _trilinear_gradients_impl(values, box_min, box_max, x, y, z, clamp01,
                              need_spatial=True, need_weights=True):
    """Shared gradient kernel for single- and multi-channel grids.

    ``values`` is (X, Y, Z) or (X, Y, Z, C).  Returns
    (value, spatial, weights, corner_indices) where spatial is (..., [C,] 3),
    weights (..., 8) and corner_indices (..., 8).  All outputs are zeroed
    outside the box and, for clamp01 grids, where the result clamp is active.
    """
    multi = values.ndim == 4
    dims = values.shape[:3]
    (gx, gy, gz), _, idx, (fx, fy, fz), inside = _grid_setup(dims, box_min, box_max, x, y, z)
    corners = _corner_indices(dims, *idx)
    wlist = _corner_weights(fx, fy, fz)
    weights = np.stack(wlist, axis=-1) if need_weights else None

    # accumulate corners sequentially, in the same order as _trilinear, so
    # recomputed values agree bitwise with the rendering march
    if multi:
        flat = values.reshape(-1, values.shape[3])
        v = flat[corners]                    # (..., 8, C)
        out = wlist[0][..., None] * v[..., 0, :]
        for c in range(1, 8):
            out = out + wlist[c][..., None] * v[..., c, :]
    else:
        flat = values.reshape(-1)
        v = flat[corners]                    # (..., 8)
        out = wlist[0] * v[..., 0]
        for c in range(1, 8):
            out = out + wlist[c] * v[..., c]

    # partials with respect to the cell fractions
    ex, ey, ez = 1.0 - fx, 1.0 - fy, 1.0 - fz
    if not need_spatial:
        live = inside
        if clamp01 and not multi:
            live = live & (out >= 0.0) & (out <= 1.0)
        mask = live.astype(np.float64)
        if multi:
            out = np.where(inside[..., None], out, 0.0)
        else:
            out = np.where(inside, out, 0.0)
            if clamp01:
                out = np.clip(out, 0.0, 1.0)
        if need_weights:
            weights = weights * mask[..., None]
        return out, None, weights, corners
    if multi:
        dfx = (
            ey[..., None] * ez[..., None] * (v[..., 1, :] - v[..., 0, :])
            + fy[..., None] * ez[..., None] * (v[..., 3, :] - v[..., 2, :])
            + ey[..., None] * fz[..., None] * (v[..., 5, :] - v[..., 4, :])
            + fy[..., None] * fz[..., None] * (v[..., 7, :] - v[..., 6, :])
        )
        dfy = (
            ex[..., None] * ez[..., None] * (v[..., 2, :] - v[..., 0, :])
            + fx[..., None] * ez[..., None] * (v[..., 3, :] - v[..., 1, :])
            + ex[..., None] * fz[..., None] * (v[..., 6, :] - v[..., 4, :])
            + fx[..., None] * fz[..., None] * (v[..., 7, :] - v[..., 5, :])
        )
        dfz = (
            ex[..., None] * ey[..., None] * (v[..., 4, :] - v[..., 0, :])
            + fx[..., None] * ey[..., None] * (v[..., 5, :] - v[..., 1, :])
            + ex[..., None] * fy[..., None] * (v[..., 6, :] - v[..., 2, :])
            + fx[..., None] * fy[..., None] * (v[..., 7, :] - v[..., 3, :])
        )
    else:
        dfx = (
            ey * ez * (v[..., 1] - v[..., 0]) + fy * ez * (v[..., 3] - v[..., 2])
            + ey * fz * (v[..., 5] - v[..., 4]) + fy * fz * (v[..., 7] - v[..., 6])
        )
        dfy = (
            ex * ez * (v[..., 2] - v[..., 0]) + fx * ez * (v[..., 3] - v[..., 1])
            + ex * fz * (v[..., 6] - v[..., 4]) + fx * fz * (v[..., 7] - v[..., 5])
        )
        dfz = (
            ex * ey * (v[..., 4] - v[..., 0]) + fx * ey * (v[..., 5] - v[..., 1])
            + ex * fy * (v[..., 6] - v[..., 2]) + fx * fy * (v[..., 7] - v[..., 3])
        )

    # chain to world units; zero where the edge clamp froze the coordinate
    X, Y, Z = dims
    live_x = (gx >= 0.0) & (gx <= X - 1.0)
    live_y = (gy >= 0.0) & (gy <= Y - 1.0)
    live_z = (gz >= 0.0) & (gz <= Z - 1.0)
    sx = X / (box_max[0] - box_min[0])
    sy = Y / (box_max[1] - box_min[1])
    sz = Z / (box_max[2] - box_min[2])
    if multi:
        spatial = np.stack(
            [
                dfx * np.where(live_x, sx, 0.0)[..., None],
                dfy * np.where(live_y, sy, 0.0)[..., None],
                dfz * np.where(live_z, sz, 0.0)[..., None],
            ],
            axis=-1,
        )  # (..., C, 3)
    else:
        spatial = np.stack(
            [
                dfx * np.where(live_x, sx, 0.0),
                dfy * np.where(live_y, sy, 0.0),
                dfz * np.where(live_z, sz, 0.0),
            ],
            axis=-1,
        )

    live = inside
    if clamp01 and not multi:
        live = live & (out >= 0.0) & (out <= 1.0)
    mask = live.astype(np.float64)
    if multi:
        spatial = spatial * mask[..., None, None]
        out = np.where(inside[..., None], out, 0.0)
    else:
        spatial = spatial * mask[..., None]
        out = np.where(inside, out, 0.0)
        if clamp01:
            out = np.clip(out, 0.0, 1.0)
    if need_weights:
        weights = weights * mask[..., None]
    return out, spatial, weights, corners


def trilinear_gradients(volume: DensityVolume, points):
    """Spatial gradient and the 8 voxel weights of the interpolant.

    Returns ``(spatial, weights, corner_indices)``: ``spatial`` is the world
    space gradient (..., 3), ``weights`` the per-corner sensitivities
    (..., 8) and ``corner_indices`` flat indices into ``volume.values``.
    Outside the box, and where the [0, 1] result clamp is active, every
    output is zero.
    """
    pts = np.asarray(points, dtype=np.float64)
    _, spatial, weights, corners = _trilinear_gradients_impl(
        volume.values, volume.box_min, volume.box_max,
        pts[..., 0], pts[..., 1], pts[..., 2], clamp01=True,
    )
    return spatial, weights, corners


# ---------------------------------------------------------------------------
# transfer function
# ---------------------------------------------------------------------------


def _tf_lookup(texels, d):
    """Linearly interpolated texel lookup; ``d`` may be a Dual.

    Returns a tuple of 4 channel outputs (r, g, b, tau).
    """
    R = texels.shape[0]
    dc = ad.clip(d, 0.0, 1.0)
    t = dc * float(R) - 0.5
    f = ad.clip(t, 0.0, float(R - 1))
    i0 = np.clip(np.floor(ad.value_of(f)).astype(np.intp), 0, max(R - 2, 0))
    i1 = np.minimum(i0 + 1, R - 1)
    w = f - i0
    return tuple((1.0 - w) * texels[i0, c] + w * texels[i1, c] for c in range(4))


def _tf_lookup_fused(texels, d):
    """Channel-fused plain-array texel lookup, bitwise equal to _tf_lookup."""
    R = texels.shape[0]
    dc = np.clip(d, 0.0, 1.0)
    t = dc * float(R) - 0.5
    f = np.clip(t, 0.0, float(R - 1))
    i0 = np.clip(np.floor(f).astype(np.intp), 0, max(R - 2, 0))
    i1 = np.minimum(i0 + 1, R - 1)
    w = f - i0
    return (1.0 - w)[..., None] * texels[i0] + w[..., None] * texels[i1]


def tf_sample(tf: TransferFunction, d) -> np.ndarray:
    """(rgb emission, tau) for densities ``d``; clamp-to-edge beyond texel centers."""
    d = np.asarray(d, dtype=np.float64)
    return np.stack(_tf_lookup(tf.texels, d), axis=-1)


def tf_gradients(tf: TransferFunction, d):
    """Slope of the lookup and the two texel weights.

    Returns ``(slope, weights, texel_indices)`` with shapes (..., 4),
    (..., 2) and (..., 2).  The slope is zero in the clamp-to-edge regions.
    """
    d = np.asarray(d, dtype=np.float64)
    texels = tf.texels
    R = texels.shape[0]
    dc = np.clip(d, 0.0, 1.0)
    t = dc * float(R) - 0.5
    f = np.clip(t, 0.0, float(R - 1))
    i0 = np.clip(np.floor(f).astype(np.intp), 0, max(R - 2, 0))
    i1 = np.minimum(i0 + 1, R - 1)
    w = f - i0
    # interior slope of the piecewise-linear interpolant, in density units;
    # the [0,1] density clamp adds its own gate
    live = (t >= 0.0) & (t <= R - 1.0) & (d >= 0.0) & (d <= 1.0)
    slope = (texels[i1] - texels[i0]) * float(R) * live[..., None]
    weights = np.stack([1.0 - w, w], axis=-1)
    indices = np.stack([i0, i1], axis=-1)
    return slope, weights, indices


# ---------------------------------------------------------------------------
# opacity
# ---------------------------------------------------------------------------


def opacity_from_density(tau, dt):
    """Beer-Lambert opacity of one segment and its tau derivative.

    alpha = 1 - exp(-dt * tau), clamped to at most 1 - EPS_ALPHA so the
    compositing inversion stays well posed.  Returns ``(alpha, dalpha_dtau)``
    with the derivative zeroed where the clamp is active.
    """
    tau = np.asarray(tau, dtype=np.float64)
    e = np.exp(-dt * tau)
    alpha_raw = 1.0 - e
    clamped = alpha_raw > 1.0 - EPS_ALPHA
    alpha = np.where(clamped, 1.0 - EPS_ALPHA, alpha_raw)
    dalpha = np.where(clamped, 0.0, dt * e)
    return alpha, dalpha
