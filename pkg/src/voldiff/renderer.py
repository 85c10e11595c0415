"""Emission-absorption ray marcher and its three differentiation paths.

``render`` marches front to back with Beer-Lambert segment opacities.
``render_forward_grad`` re-runs the same march over dual numbers for
low-dimensional targets (camera and stepsize).  ``render_adjoint`` walks the
samples in reverse, propagating output sensitivities onto any one target;
intermediate accumulated colors are either kept from the forward pass
("stored") or reconstructed on the fly by inverting the compositing step
("inversion"), which keeps per-ray state independent of the step count.

Pixels are processed in fixed row tiles.  Tiles are independent work items
and per-tile gradient buffers are reduced in tile order, so results are
bit-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    InvalidInputError,
    InvalidParameterError,
    UnsupportedConfigurationError,
)
from .field import (
    EPS_ALPHA,
    ColorVolume,
    DensityVolume,
    SphericalCamera,
    TransferFunction,
    _camera_rays,
    _tf_lookup,
    _tf_lookup_fused,
    _trilinear,
    _trilinear_gradients_impl,
    _trilinear_multi,
    camera_gradients,
)

TILE_ROWS = 64
ALPHA_STOP = 1.0 - 1e-4

_TARGETS = ("none", "camera", "stepsize", "tf", "volume")
_MEMORY_MODES = ("inversion", "stored")


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


@dataclass
class ImageRGBA:
    """Premultiplied rgb emission plus accumulated opacity, shape (H, W, 4)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 4:
            raise InvalidInputError("image data must have shape (H, W, 4)")

    @classmethod
    def zeros(cls, width: int, height: int) -> "ImageRGBA":
        return cls(np.zeros((height, width, 4)))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def alpha(self) -> np.ndarray:
        return self.data[..., 3]


@dataclass
class RenderConfig:
    """Stepsize, differentiation target and adjoint memory mode."""

    dt: float
    target: str = "none"
    memory_mode: str = "inversion"
    precision: str = "double"

    def __post_init__(self):
        self.dt = float(self.dt)
        if self.dt <= 0.0:
            raise InvalidParameterError("stepsize must be positive")
        if self.target not in _TARGETS:
            raise InvalidParameterError(f"unknown differentiation target {self.target!r}")
        if self.memory_mode not in _MEMORY_MODES:
            raise InvalidParameterError(f"unknown memory mode {self.memory_mode!r}")
        if self.precision not in ("double", "single"):
            raise InvalidParameterError("precision must be 'double' or 'single'")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32


@dataclass
class GradientSet:
    """Gradients of a scalar loss for the selected target; others are None."""

    d_stepsize: float | None = None
    d_camera: np.ndarray | None = None
    d_tf: np.ndarray | None = None
    d_volume: np.ndarray | None = None
    d_color: np.ndarray | None = None
    state_floats: int = 0


# ---------------------------------------------------------------------------
# compositing step, its inverse and its adjoint
# ---------------------------------------------------------------------------


def blend(state, sample):
    """One front-to-back compositing step.

    ``state`` and ``sample`` are rgba arrays (...,4); the sample rgb is the
    opacity-weighted emission of the segment.
    """
    state = np.asarray(state, dtype=np.float64)
    sample = np.asarray(sample, dtype=np.float64)
    one_m = 1.0 - state[..., 3:4]
    out = np.empty(np.broadcast_shapes(state.shape, sample.shape))
    out[..., :3] = state[..., :3] + one_m * sample[..., :3]
    out[..., 3:4] = state[..., 3:4] + one_m * sample[..., 3:4]
    return out


def blend_invert(nxt, sample):
    """Exact inverse of :func:`blend` given the blended sample."""
    nxt = np.asarray(nxt, dtype=np.float64)
    sample = np.asarray(sample, dtype=np.float64)
    a_s = sample[..., 3]
    if np.any(a_s > 1.0 - EPS_ALPHA + 1e-15):
        raise InvalidInputError("sample opacity exceeds the invertibility clamp")
    a_prev = (a_s - nxt[..., 3]) / (a_s - 1.0)
    out = np.empty(np.broadcast_shapes(nxt.shape, sample.shape))
    out[..., :3] = nxt[..., :3] - (1.0 - a_prev)[..., None] * sample[..., :3]
    out[..., 3] = a_prev
    return out


def blend_adjoint(state, sample, next_hat):
    """Transpose of the blend derivative applied to ``next_hat``.

    Returns ``(state_hat, sample_hat)``.
    """
    state = np.asarray(state, dtype=np.float64)
    sample = np.asarray(sample, dtype=np.float64)
    next_hat = np.asarray(next_hat, dtype=np.float64)
    a = state[..., 3]
    a_s = sample[..., 3]
    cs = sample[..., :3]
    c_hat = next_hat[..., :3]
    a_hat = next_hat[..., 3]
    state_hat = np.empty(np.broadcast_shapes(state.shape, sample.shape, next_hat.shape))
    sample_hat = np.empty_like(state_hat)
    state_hat[..., :3] = c_hat
    state_hat[..., 3] = (1.0 - a_s) * a_hat - np.sum(cs * c_hat, axis=-1)
    sample_hat[..., :3] = (1.0 - a)[..., None] * c_hat
    sample_hat[..., 3] = (1.0 - a) * a_hat
    return state_hat, sample_hat


# ---------------------------------------------------------------------------
# ray setup
# ---------------------------------------------------------------------------


def _slab_intersect(o, w, box_min, box_max):
    """Entry/exit parameters of rays against the volume box.

    ``o``/``w`` are (3, n) value arrays.  Returns
    ``(tn, tf, axis, clamped, miss)`` where ``axis`` is the face axis that
    decided the entry and ``clamped`` marks rays starting inside the box.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (box_min[:, None] - o) / w
        t2 = (box_max[:, None] - o) / w
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    par = w == 0.0
    in_slab = (o >= box_min[:, None]) & (o <= box_max[:, None])
    lo = np.where(par, np.where(in_slab, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(in_slab, np.inf, -np.inf), hi)
    axis = np.argmax(lo, axis=0)
    tn = np.max(lo, axis=0)
    tf_ = np.min(hi, axis=0)
    clamped = tn <= 0.0
    tn = np.maximum(tn, 0.0)
    miss = ~(tf_ > tn) | ~np.isfinite(tn) | ~np.isfinite(tf_)
    tn = np.where(miss, 0.0, tn)
    tf_ = np.where(miss, 0.0, tf_)
    return tn, tf_, axis, clamped, miss


def _step_counts(tn, tf_, dt, miss):
    # epsilon guard keeps exact-integer chord/dt ratios from gaining a step
    r = (tf_ - tn) / dt
    n = np.ceil(r - 1e-9).astype(np.intp)
    n = np.where(miss, 0, np.maximum(n, 0))
    return n


def _entry_param_dual(o3, w3, box_min, box_max, slab):
    """Entry parameter as a dual, differentiating the deciding face hit."""
    tn, _, axis, clamped, miss = slab
    need = ~clamped & ~miss
    p = next(c.p for c in (*o3, *w3) if isinstance(c, ad.Dual))
    out = ad.Dual.constant(tn, p)
    for k in range(3):
        sel = need & (axis == k)
        if not np.any(sel):
            continue
        wk = ad.where(sel, w3[k], 1.0)
        face = np.where(ad.value_of(w3[k]) > 0.0, box_min[k], box_max[k])
        cand = (face - o3[k]) / wk
        out = ad.where(sel, cand, out)
    return out


def _tile_ranges(height):
    return [(r, min(r + TILE_ROWS, height)) for r in range(0, height, TILE_ROWS)]


def _tile_pixels(cam: SphericalCamera, r0: int, r1: int):
    v, u = np.meshgrid(np.arange(r0, r1), np.arange(cam.width), indexing="ij")
    return u.ravel().astype(np.float64), v.ravel().astype(np.float64)


def _run_tiles(fn, tiles, threads):
    if threads <= 1:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tiles))


# ---------------------------------------------------------------------------
# the march
# ---------------------------------------------------------------------------


def _sample_scene(scene, x, y, z):
    """(r, g, b, tau_raw) at world points; entries generic over duals."""
    kind = scene[0]
    if kind == "density":
        _, volume, tf = scene
        d = _trilinear(volume.values, volume.box_min, volume.box_max, x, y, z, clamp01=True)
        return _tf_lookup(tf.texels, d)
    _, cv = scene
    return tuple(
        _trilinear(cv.values[..., c], cv.box_min, cv.box_max, x, y, z, clamp01=False)
        for c in range(4)
    )


def _march(scene, o3, w3, dt, slab, n_steps, *, early_stop=False):
    """Front-to-back march over possibly-dual scalars.

    Returns ``(rgb, alpha)`` where rgb is a component tuple.
    """
    tn = slab[0]
    dual_entry = any(isinstance(c, ad.Dual) for c in (*o3, *w3))
    box_min, box_max = (scene[1].box_min, scene[1].box_max)
    tn_t = _entry_param_dual(o3, w3, box_min, box_max, slab) if dual_entry else tn
    xo = tuple(o3[k] + tn_t * w3[k] for k in range(3))

    n_rays = n_steps.shape[0]
    rgb = [np.zeros(n_rays), np.zeros(n_rays), np.zeros(n_rays)]
    alpha = np.zeros(n_rays)
    n_max = int(n_steps.max()) if n_rays else 0

    for i in range(n_max):
        act = i < n_steps
        if early_stop:
            act = act & (ad.value_of(alpha) <= ALPHA_STOP)
            if not np.any(act):
                break
        t_i = dt * float(i)
        x = xo[0] + t_i * w3[0]
        y = xo[1] + t_i * w3[1]
        z = xo[2] + t_i * w3[2]
        r, g, b, tau_raw = _sample_scene(scene, x, y, z)
        tau = ad.maximum(tau_raw, 0.0)
        a = 1.0 - ad.exp(-(dt * tau))
        a = ad.minimum(a, 1.0 - EPS_ALPHA)
        one_m = 1.0 - alpha
        for k, c in enumerate((r, g, b)):
            rgb[k] = rgb[k] + ad.where(act, one_m * (a * c), 0.0)
        alpha = alpha + ad.where(act, one_m * a, 0.0)
    return rgb, alpha


def _march_fused(scene, o, w, dt, slab, n_steps, *, early_stop=False,
                 record_states=False, dtype=np.float64):
    """Plain-array march with fused rgba channels.

    Performs exactly the same elementwise arithmetic as :func:`_march` on
    undifferentiated inputs, so the produced values are bit-identical; only
    the array layout differs.  Returns ``(rgba (n, 4), states)``.
    """
    tn = slab[0]
    xo = o + tn[None, :] * w
    n_rays = n_steps.shape[0]
    out = np.zeros((n_rays, 4), dtype=dtype)
    states = [] if record_states else None
    n_max = int(n_steps.max()) if n_rays else 0
    if scene[0] == "density":
        _, volume, tf = scene
        vol_vals = volume.values.astype(dtype, copy=False)
        texels = tf.texels.astype(dtype, copy=False)
        bmin, bmax = volume.box_min, volume.box_max
    else:
        _, cv = scene
        cv_vals = cv.values.astype(dtype, copy=False)
        bmin, bmax = cv.box_min, cv.box_max

    for i in range(n_max):
        act = i < n_steps
        if early_stop:
            act = act & (out[:, 3] <= ALPHA_STOP)
            if not np.any(act):
                break
        t_i = dt * float(i)
        x = xo[0] + t_i * w[0]
        y = xo[1] + t_i * w[1]
        z = xo[2] + t_i * w[2]
        if scene[0] == "density":
            d = _trilinear(vol_vals, bmin, bmax, x, y, z, clamp01=True)
            s4 = _tf_lookup_fused(texels, d)
        else:
            s4 = _trilinear_multi(cv_vals, bmin, bmax, x, y, z)
        tau = np.maximum(s4[:, 3], 0.0)
        a = 1.0 - np.exp(-(dt * tau))
        a = np.minimum(a, 1.0 - EPS_ALPHA)
        if record_states:
            states.append(out.copy())
        one_m = 1.0 - out[:, 3]
        nxt = np.empty_like(out)
        nxt[:, :3] = out[:, :3] + np.where(
            act[:, None], one_m[:, None] * (a[:, None] * s4[:, :3]), 0.0
        )
        nxt[:, 3] = out[:, 3] + np.where(act, one_m * a, 0.0)
        out = nxt
    return out, states


def _ray_setup(scene, cam, u, v, dtype=np.float64):
    """Plain-value camera rays and slab data for one pixel block."""
    o3, w3 = _camera_rays(cam.lon_deg, cam.lat_deg, cam, u, v)
    n = u.shape[0]
    o = np.stack([np.full(n, c, dtype=dtype) for c in o3], axis=0)
    w = np.stack([np.asarray(c, dtype=dtype) for c in w3], axis=0)
    box_min, box_max = scene[1].box_min, scene[1].box_max
    slab = _slab_intersect(o, w, box_min.astype(dtype), box_max.astype(dtype))
    return o, w, slab


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def _render_scene(scene, cam, cfg, threads):
    dtype = cfg.dtype
    early = cfg.target == "none"

    def do_tile(rows):
        u, v = _tile_pixels(cam, *rows)
        o, w, slab = _ray_setup(scene, cam, u, v, dtype)
        n_steps = _step_counts(slab[0], slab[1], cfg.dt, slab[4])
        tile, _ = _march_fused(
            scene, o, w, dtype(cfg.dt), slab, n_steps, early_stop=early, dtype=dtype
        )
        return tile.reshape(rows[1] - rows[0], cam.width, 4)

    tiles = _run_tiles(do_tile, _tile_ranges(cam.height), threads)
    return ImageRGBA(np.concatenate(tiles, axis=0))


def render(volume: DensityVolume, tf: TransferFunction, cam: SphericalCamera,
           cfg: RenderConfig, *, threads: int = 1) -> ImageRGBA:
    """Direct volume rendering of a density grid through a transfer function.

    Rays that miss the box yield transparent black.  Early ray termination is
    applied only when no differentiation target is selected, so rendered
    values agree with every gradient path sample for sample.
    """
    return _render_scene(("density", volume, tf), cam, cfg, threads)


def render_colorvol(cv: ColorVolume, cam: SphericalCamera, cfg: RenderConfig,
                    *, threads: int = 1) -> ImageRGBA:
    """Render a pre-shaded color volume (per-voxel rgb emission + absorption)."""
    return _render_scene(("color", cv), cam, cfg, threads)


def render_forward_grad(volume: DensityVolume, tf: TransferFunction,
                        cam: SphericalCamera, cfg: RenderConfig,
                        *, threads: int = 1):
    """Image and its per-pixel Jacobian via forward-mode duals.

    Supports the low-dimensional targets: ``camera`` (p=2, per-degree) and
    ``stepsize`` (p=1).  Returns ``(image, jacobian)`` with jacobian shape
    (H, W, 4, p).
    """
    if cfg.target == "camera":
        p = 2
        lon = ad.Dual.seed(cam.lon_deg, 0, p)
        lat = ad.Dual.seed(cam.lat_deg, 1, p)
        dt = cfg.dt
    elif cfg.target == "stepsize":
        p = 1
        lon, lat = cam.lon_deg, cam.lat_deg
        dt = ad.Dual.seed(cfg.dt, 0, p)
    else:
        raise UnsupportedConfigurationError(
            f"forward mode supports camera and stepsize, not {cfg.target!r}"
        )
    scene = ("density", volume, tf)

    def do_tile(rows):
        u, v = _tile_pixels(cam, *rows)
        n = u.shape[0]
        o3d, w3d = _camera_rays(lon, lat, cam, u, v)
        if cfg.target == "camera":
            o3 = tuple(
                ad.Dual(np.full(n, c.val), np.broadcast_to(c.der[:, None], (p, n)))
                for c in o3d
            )
            w3 = w3d
        else:
            o3 = tuple(np.full(n, c) for c in o3d)
            w3 = tuple(np.asarray(c) for c in w3d)
        o_val = np.stack([np.broadcast_to(ad.value_of(c), (n,)) for c in o3], axis=0)
        w_val = np.stack([np.broadcast_to(ad.value_of(c), (n,)) for c in w3], axis=0)
        slab = _slab_intersect(o_val, w_val, volume.box_min, volume.box_max)
        n_steps = _step_counts(slab[0], slab[1], cfg.dt, slab[4])
        rgb, alpha = _march(scene, o3, w3, dt, slab, n_steps)
        h = rows[1] - rows[0]
        tile = np.stack([ad.value_of(c) for c in (*rgb, alpha)], axis=-1)
        jac = np.stack(
            [np.moveaxis(ad.derivative_of(c, p), 0, -1) for c in (*rgb, alpha)],
            axis=-2,
        )  # (n, 4, p) with zero rows for untouched channels
        jac = np.broadcast_to(jac, (n, 4, p))
        return tile.reshape(h, cam.width, 4), jac.reshape(h, cam.width, 4, p)

    out = _run_tiles(do_tile, _tile_ranges(cam.height), threads)
    img = ImageRGBA(np.concatenate([t for t, _ in out], axis=0))
    jac = np.concatenate([j for _, j in out], axis=0)
    return img, jac


# ---------------------------------------------------------------------------
# adjoint
# ---------------------------------------------------------------------------


def _tf_lookup_with_grads(texels, d, need_slope=True, need_weights=True):
    """Values, slopes and texel weights of the lookup in one pass."""
    R = texels.shape[0]
    dc = np.clip(d, 0.0, 1.0)
    t = dc * float(R) - 0.5
    f = np.clip(t, 0.0, float(R - 1))
    i0 = np.clip(np.floor(f).astype(np.intp), 0, max(R - 2, 0))
    i1 = np.minimum(i0 + 1, R - 1)
    w = f - i0
    out = (1.0 - w)[..., None] * texels[i0] + w[..., None] * texels[i1]
    slope = None
    if need_slope:
        live = (t >= 0.0) & (t <= R - 1.0) & (d >= 0.0) & (d <= 1.0)
        slope = (texels[i1] - texels[i0]) * float(R) * live[..., None]
    weights = np.stack([1.0 - w, w], axis=-1) if need_weights else None
    indices = np.stack([i0, i1], axis=-1) if need_weights else None
    return out, slope, weights, indices


def _adjoint_tile(scene, cam, cfg, seed_flat, rows, final_rgba=None):
    """Backward pass over one pixel tile; returns partial gradients.

    ``final_rgba`` optionally supplies the forward-rendered tile (n, 4); in
    inversion mode this skips re-running the forward march.
    """
    kind = scene[0]
    target = cfg.target
    dt = cfg.dt
    u, v = _tile_pixels(cam, *rows)
    n = u.shape[0]
    o, w, slab = _ray_setup(scene, cam, u, v)
    tn, tf_, axis, clamped, miss = slab
    n_steps = _step_counts(tn, tf_, dt, miss)
    n_max = int(n_steps.max()) if n else 0

    stored = cfg.memory_mode == "stored"
    if stored or final_rgba is None:
        final_rgba, states = _march_fused(scene, o, w, dt, slab, n_steps,
                                          record_states=stored)
    else:
        states = None
    state_floats = 4 * n * (n_max if stored else 2)

    xo = o + tn[None, :] * w

    if kind == "density":
        _, volume, tf = scene
        vol_dims = volume.values.shape
    else:
        _, cv = scene
        vol_dims = cv.values.shape[:3]

    # accumulators for the selected target
    acc_tf = np.zeros_like(tf.texels) if (kind == "density" and target == "tf") else None
    acc_vol = (
        np.zeros(int(np.prod(vol_dims)))
        if (kind == "density" and target == "volume")
        else None
    )
    acc_col = (
        np.zeros((int(np.prod(vol_dims)), 4))
        if (kind == "color" and target == "volume")
        else None
    )
    acc_dt = 0.0
    xo_hat = np.zeros((3, n))
    w_hat = np.zeros((3, n))

    c_hat = seed_flat[:, :3].copy()       # constant along the backward walk
    a_hat = seed_flat[:, 3].copy()
    color_c = final_rgba[:, :3].copy()    # running reconstructed state (n, 3)
    color_a = final_rgba[:, 3].copy()

    want_pos = target in ("camera", "stepsize")

    for i in reversed(range(n_max)):
        act = i < n_steps
        t_i = dt * float(i)
        x, y, z = (xo[k] + t_i * w[k] for k in range(3))

        if kind == "density":
            d, spatial, w8, idx8 = _trilinear_gradients_impl(
                volume.values, volume.box_min, volume.box_max, x, y, z, clamp01=True,
                need_spatial=want_pos, need_weights=(target == "volume"),
            )
            out4, slope, tw, tidx = _tf_lookup_with_grads(
                tf.texels, d, need_slope=(target != "tf"),
                need_weights=(target == "tf"),
            )
        else:
            out4, spatial4, w8, idx8 = _trilinear_gradients_impl(
                cv.values, cv.box_min, cv.box_max, x, y, z, clamp01=False,
                need_spatial=want_pos, need_weights=True,
            )
        tau_raw = out4[..., 3]
        tau_clamped = tau_raw < 0.0
        tau = np.maximum(tau_raw, 0.0)
        e = np.exp(-dt * tau)
        a_raw = 1.0 - e
        a_clamped = a_raw > 1.0 - EPS_ALPHA
        a = np.where(a_clamped, 1.0 - EPS_ALPHA, a_raw)
        crgb = out4[..., :3]
        cs = a[:, None] * crgb

        if stored:
            c_prev, a_prev = states[i][:, :3], states[i][:, 3]
        else:
            a_prev = np.where(act, (a - color_a) / (a - 1.0), color_a)
            c_prev = np.where(act[:, None], color_c - (1.0 - a_prev)[:, None] * cs, color_c)

        # blend adjoint: rgb sensitivity passes through unchanged
        cs_hat = (1.0 - a_prev)[:, None] * c_hat
        seg_a_hat = (1.0 - a_prev) * a_hat
        a_hat_new = (1.0 - a) * a_hat - np.sum(cs * c_hat, axis=-1)

        # opacity-weighted emission cs = a * crgb
        crgb_hat = a[:, None] * cs_hat
        seg_a_hat = seg_a_hat + np.sum(crgb * cs_hat, axis=-1)

        # Beer-Lambert segment opacity
        a_raw_hat = np.where(a_clamped, 0.0, seg_a_hat)
        tau_hat = dt * e * a_raw_hat
        if target == "stepsize":
            acc_dt += float(np.sum(np.where(act, tau * e * a_raw_hat, 0.0)))
        tau_hat = np.where(tau_clamped, 0.0, tau_hat)

        out4_hat = np.concatenate([crgb_hat, tau_hat[:, None]], axis=-1)
        out4_hat = out4_hat * act[:, None]

        if kind == "density":
            if acc_tf is not None:
                np.add.at(acc_tf, tidx[:, 0], tw[:, 0, None] * out4_hat)
                np.add.at(acc_tf, tidx[:, 1], tw[:, 1, None] * out4_hat)
            else:
                d_hat = np.sum(slope * out4_hat, axis=-1)
            if acc_vol is not None:
                np.add.at(acc_vol, idx8, w8 * d_hat[:, None])
            if want_pos:
                x_hat = spatial * d_hat[:, None]
        else:
            if acc_col is not None:
                np.add.at(acc_col, idx8, w8[:, :, None] * out4_hat[:, None, :])
            if want_pos:
                x_hat = np.einsum("nc,nck->nk", out4_hat, spatial4)

        if want_pos:
            w_dot = np.sum(w * x_hat.T, axis=0)
            if target == "stepsize":
                acc_dt += float(i) * float(np.sum(w_dot))
            else:
                w_hat += (float(i) * dt) * x_hat.T
                xo_hat += x_hat.T

        a_hat = np.where(act, a_hat_new, a_hat)
        color_c, color_a = c_prev, a_prev

    grad = GradientSet(state_floats=state_floats)
    if target == "camera":
        # the entry point xo = o + tn*w also moves with the camera
        s = np.sum(w * xo_hat, axis=0)
        o_hat = xo_hat.copy()
        w_tot = w_hat + tn[None, :] * xo_hat
        need = ~clamped & ~miss
        for k in range(3):
            sel = need & (axis == k)
            wk = np.where(sel, w[k], 1.0)
            o_hat[k] += np.where(sel, -s / wk, 0.0)
            w_tot[k] += np.where(sel, -s * tn / wk, 0.0)
        j_o, j_d = camera_gradients(cam, u, v)
        grad.d_camera = np.einsum("kn,nkj->j", o_hat, j_o) + np.einsum(
            "kn,nkj->j", w_tot, j_d
        )
    elif target == "stepsize":
        grad.d_stepsize = acc_dt
    elif target == "tf" and kind == "density":
        grad.d_tf = acc_tf
    elif target == "volume" and kind == "density":
        grad.d_volume = acc_vol.reshape(vol_dims)
    elif target == "volume" and kind == "color":
        grad.d_color = acc_col.reshape(vol_dims + (4,))
    return grad


def _adjoint_scene(scene, cam, cfg, seed, threads, image=None):
    if cfg.target == "none":
        raise UnsupportedConfigurationError("adjoint requires a differentiation target")
    seed = seed.data if isinstance(seed, ImageRGBA) else np.asarray(seed, dtype=np.float64)
    if seed.shape != (cam.height, cam.width, 4):
        raise InvalidInputError(
            f"seed shape {seed.shape} does not match image {(cam.height, cam.width, 4)}"
        )
    img_data = None
    if image is not None:
        img_data = image.data if isinstance(image, ImageRGBA) else np.asarray(image)
        if img_data.shape != (cam.height, cam.width, 4):
            raise InvalidInputError("provided image does not match the camera size")

    def do_tile(rows):
        seed_flat = seed[rows[0]:rows[1]].reshape(-1, 4)
        final = None if img_data is None else img_data[rows[0]:rows[1]].reshape(-1, 4)
        return _adjoint_tile(scene, cam, cfg, seed_flat, rows, final_rgba=final)

    parts = _run_tiles(do_tile, _tile_ranges(cam.height), threads)

    total = GradientSet()
    for g in parts:  # fixed tile order keeps the reduction deterministic
        total.state_floats += g.state_floats
        for name in ("d_stepsize", "d_camera", "d_tf", "d_volume", "d_color"):
            val = getattr(g, name)
            if val is None:
                continue
            cur = getattr(total, name)
            setattr(total, name, val if cur is None else cur + val)
    return total


def render_adjoint(volume: DensityVolume, tf: TransferFunction, cam: SphericalCamera,
                   cfg: RenderConfig, seed, *, threads: int = 1,
                   image: ImageRGBA | None = None) -> GradientSet:
    """Gradient of ``sum(seed * image)`` for the target selected in ``cfg``.

    ``seed`` is the image-space adjoint (H, W, 4).  In ``inversion`` mode the
    accumulated colors are reconstructed backward through the inverted blend,
    so per-ray memory does not grow with the step count; ``stored`` mode keeps
    every intermediate state and serves as the reference.  Passing ``image``
    (a render of exactly this scene and config) skips the internal forward
    pass in inversion mode.
    """
    return _adjoint_scene(("density", volume, tf), cam, cfg, seed, threads, image)


def render_colorvol_adjoint(cv: ColorVolume, cam: SphericalCamera, cfg: RenderConfig,
                            seed, *, threads: int = 1,
                            image: ImageRGBA | None = None) -> GradientSet:
    """Adjoint for the pre-shaded color volume; target must be ``volume``."""
    if cfg.target != "volume":
        raise UnsupportedConfigurationError("color volumes differentiate per-voxel rgba only")
    return _adjoint_scene(("color", cv), cam, cfg, seed, threads, image)
