"""End-to-end gradient-based pipelines built on the differentiable renderer.

Four pipelines: viewpoint selection by opacity-entropy ascent, transfer
function reconstruction from reference images, absorption-only density
reconstruction with a coarse-to-fine schedule, and emission-absorption
density reconstruction via a pre-shaded color volume.  A 1D segment demo
exposes the non-convexity that motivates the staged pipeline.

All pipelines are deterministic given (seed, config): view batches and
restarts are reduced in fixed order regardless of the worker count.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError
from .field import (
    EPS_POLE_DEG,
    ColorVolume,
    DensityVolume,
    SphericalCamera,
    TransferFunction,
    tf_sample,
)
from .objectives import (
    l1_loss,
    opacity_entropy,
    psnr,
    smoothness_prior_tf,
    smoothness_prior_volume,
)
from .optim import OptimState, adam_step, project_params, upsample_volume
from .renderer import (
    RenderConfig,
    render,
    render_adjoint,
    render_colorvol,
    render_colorvol_adjoint,
    render_forward_grad,
)

_GOLDEN_ANGLE_DEG = 137.50776405003785
_LAT_LIMIT = 90.0 - EPS_POLE_DEG - 0.1

DEFAULT_RESTARTS = tuple(
    (lon, lat) for lon in (45.0, 135.0, 225.0, 315.0) for lat in (45.0, -45.0)
)


@dataclass
class TaskReport:
    """Everything a run produced: trace, metrics, timings and provenance."""

    task: str
    seed: int
    config: dict
    loss_trace: list = dc_field(default_factory=list)
    metrics: dict = dc_field(default_factory=dict)
    timings: dict = dc_field(default_factory=dict)
    gradient_check: dict | None = None
    extras: dict = dc_field(default_factory=dict)

    def trace_rows(self):
        return [(r["iter"], r["total"], r["data"], r["prior"]) for r in self.loss_trace]

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "task": self.task,
            "seed": self.seed,
            "config": self.config,
            "loss_trace": self.loss_trace,
            "metrics": self.metrics,
            "timings": self.timings,
            "gradient_check": self.gradient_check,
        }


def _spot_record(target_name: str, analytic: float, loss_fn, base: float,
                 h: float) -> dict:
    """One-coordinate central-difference check with a step-refinement flag.

    ``loss_fn`` evaluates the objective at a perturbed coordinate value.  The
    h/4 re-estimate guards against brackets that straddle a kink of the
    piecewise-linear transfer function; those give ``fd_stable`` False.
    """
    fd_h = (loss_fn(base + h) - loss_fn(base - h)) / (2.0 * h)
    fd = (loss_fn(base + h / 4.0) - loss_fn(base - h / 4.0)) / (h / 2.0)
    stable = abs(fd_h - fd) <= 2e-4 * max(abs(fd), abs(fd_h), 1e-9)
    return {
        "target": target_name,
        "analytic": float(analytic),
        "fd": float(fd),
        "rel_err": float(abs(analytic - fd) / max(abs(fd), abs(analytic), 1e-12)),
        "fd_stable": bool(stable),
    }


def _map_ordered(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# view generation and reference rendering
# ---------------------------------------------------------------------------


def fibonacci_views(count: int, radius: float, center=(0.0, 0.0, 0.0),
                    fov_y_deg: float = 30.0, width: int = 64, height: int = 64):
    """Near-uniform camera poses on the sphere via the golden-angle spiral."""
    views = []
    for k in range(count):
        zk = 1.0 - 2.0 * (k + 0.5) / count
        lat = math.degrees(math.asin(max(-1.0, min(1.0, zk))))
        lat = max(-_LAT_LIMIT, min(_LAT_LIMIT, lat))
        lon = (k * _GOLDEN_ANGLE_DEG) % 360.0
        views.append(SphericalCamera(lon, lat, radius, center, fov_y_deg, width, height))
    return views


def render_references(volume, tf, views, cfg: RenderConfig, threads: int = 1):
    """Render one image per view with the differentiated sampling pattern."""
    return _map_ordered(lambda cam: render(volume, tf, cam, cfg, threads=1), views, threads)


# ---------------------------------------------------------------------------
# viewpoint selection
# ---------------------------------------------------------------------------


def _entropy_and_grad(volume, tf, cam, cfg):
    img, jac = render_forward_grad(volume, tf, cam, cfg)
    h, seed, _ = opacity_entropy(img)
    g = np.array([float(np.sum(seed * jac[..., 0])), float(np.sum(seed * jac[..., 1]))])
    return h, g, img


def view_entropy(volume, tf, cam, cfg) -> float:
    """Opacity entropy of the rendered view (no gradients)."""
    img = render(volume, tf, cam, cfg)
    h, _, _ = opacity_entropy(img)
    return h


def optimize_viewpoint(volume, tf, cfg: RenderConfig, *, restarts=None, iters: int = 20,
                       radius: float | None = None, center=None, fov_y_deg: float = 30.0,
                       width: int = 64, height: int = 64, initial_step_deg: float = 10.0,
                       seed: int = 0, threads: int = 1) -> TaskReport:
    """Entropy ascent over (longitude, latitude) from several restarts.

    Each restart climbs the opacity entropy with forward-mode gradients and a
    sufficient-increase guard: a proposal that lowers the entropy halves the
    step instead of moving.  Latitude proposals beyond the pole exclusion are
    clamped and counted in the report.
    """
    if restarts is None:
        restarts = DEFAULT_RESTARTS
    restarts = list(restarts)
    if not restarts:
        raise InvalidInputError("at least one restart pose is required")
    if center is None:
        center = 0.5 * (volume.box_min + volume.box_max)
    if radius is None:
        radius = 2.0 * float(np.max(volume.box_max - volume.box_min))
    camcfg = RenderConfig(dt=cfg.dt, target="camera", memory_mode=cfg.memory_mode)

    t0 = time.perf_counter()
    pole_clamps = 0

    def climb(start):
        lon, lat = float(start[0]), float(start[1])
        lat = max(-_LAT_LIMIT, min(_LAT_LIMIT, lat))
        cam = SphericalCamera(lon, lat, radius, center, fov_y_deg, width, height)
        h, g, _ = _entropy_and_grad(volume, tf, cam, camcfg)
        gn = float(np.linalg.norm(g))
        step = initial_step_deg / gn if gn > 0 else 0.0
        path = [(lon, lat, float(h))]
        clamps = 0
        for _ in range(iters):
            if step == 0.0:
                path.append((lon, lat, h))
                continue
            new_lon = lon + step * g[0]
            new_lat = lat + step * g[1]
            if abs(new_lat) > _LAT_LIMIT:
                new_lat = max(-_LAT_LIMIT, min(_LAT_LIMIT, new_lat))
                clamps += 1
            cam = SphericalCamera(new_lon, new_lat, radius, center, fov_y_deg, width, height)
            h_new, g_new, _ = _entropy_and_grad(volume, tf, cam, camcfg)
            if h_new >= h:
                lon, lat, h, g = new_lon % 360.0, new_lat, h_new, g_new
            else:
                step *= 0.5
            path.append((float(lon), float(lat), float(h)))
        return {"start": [float(start[0]), float(start[1])], "path": path,
                "final": (float(lon), float(lat)), "entropy": float(h),
                "pole_clamps": clamps}

    runs = _map_ordered(climb, restarts, threads)
    pole_clamps = sum(r["pole_clamps"] for r in runs)
    best = max(range(len(runs)), key=lambda i: runs[i]["entropy"])

    report = TaskReport(
        task="viewpoint",
        seed=seed,
        config={
            "dt": cfg.dt, "iters": iters, "restarts": [list(r) for r in restarts],
            "radius": radius, "fov_y_deg": fov_y_deg, "width": width, "height": height,
            "initial_step_deg": initial_step_deg, "threads": threads,
        },
    )
    for it in range(1, iters + 1):
        best_h = max(r["path"][it][2] for r in runs)
        report.loss_trace.append(
            {"iter": it - 1, "total": best_h, "data": best_h, "prior": 0.0}
        )
    report.metrics = {
        "best_entropy": runs[best]["entropy"],
        "best_pose": list(runs[best]["final"]),
        "start_entropies": [r["path"][0][2] for r in runs],
        "pole_clamps": pole_clamps,
        "trajectories": [[list(p) for p in r["path"]] for r in runs],
    }
    report.extras = {"runs": runs, "best_index": best}
    report.timings = {"total_s": time.perf_counter() - t0}

    # spot check of the gradient path at the first restart
    lon0, lat0 = restarts[0]
    lat0 = max(-_LAT_LIMIT, min(_LAT_LIMIT, float(lat0)))
    cam0 = SphericalCamera(lon0, lat0, radius, center, fov_y_deg, width, height)
    _, g0, _ = _entropy_and_grad(volume, tf, cam0, camcfg)
    report.gradient_check = _spot_record(
        "camera.lon", g0[0],
        lambda lon: view_entropy(
            volume, tf,
            SphericalCamera(lon, lat0, radius, center, fov_y_deg, width, height),
            camcfg),
        lon0, 1e-5,
    )
    return report


# ---------------------------------------------------------------------------
# transfer-function reconstruction
# ---------------------------------------------------------------------------


def _tf_loss_and_grad(volume, tf, views, refs, lam, cfg, threads):
    imgs = _map_ordered(lambda cam: render(volume, tf, cam, cfg, threads=1), views, threads)
    data, seeds = l1_loss(imgs, refs)
    grads = _map_ordered(
        lambda iv: render_adjoint(volume, tf, views[iv], cfg, seeds[iv],
                                  threads=1, image=imgs[iv]),
        range(len(views)), threads,
    )
    g = np.zeros_like(tf.texels)
    for gs in grads:
        g += gs.d_tf
    prior, pg = smoothness_prior_tf(tf)
    return data, prior, g + lam * pg, imgs


def reconstruct_tf(volume, refs, views, *, resolution: int = 64, lam: float = 0.4,
                   lr: float = 0.8, epochs: int = 200, dt: float | None = None,
                   init_tf: TransferFunction | None = None, init_scale: float = 0.25,
                   seed: int = 0, threads: int = 1) -> TaskReport:
    """Recover the transfer function whose renderings match the references.

    Minimizes the mean absolute image difference plus ``lam`` times the texel
    smoothing prior with Adam, starting from projected Gaussian noise.
    """
    if len(refs) != len(views):
        raise InvalidInputError("reference and view counts differ")
    if dt is None:
        dt = 1.0 * float(np.min(volume.voxel_size))
    cfg = RenderConfig(dt=dt, target="tf")
    rng = np.random.default_rng(seed)
    if init_tf is None:
        texels = project_params(
            rng.normal(0.5, init_scale, size=(resolution, 4)), "tf"
        )
    else:
        texels = project_params(init_tf.texels.copy(), "tf")
    tf = TransferFunction(texels)

    t0 = time.perf_counter()
    report = TaskReport(
        task="tf-recon", seed=seed,
        config={"resolution": resolution, "lam": lam, "lr": lr, "epochs": epochs,
                "dt": dt, "views": len(views), "threads": threads},
    )

    # spot finite-difference check on one texel before optimizing
    data0, prior0, g0, imgs = _tf_loss_and_grad(volume, tf, views, refs, lam, cfg, threads)
    flat = np.abs(g0).ravel()
    cand = np.flatnonzero(flat >= 0.3 * flat.max()) if flat.max() > 0 else np.array([0])
    ci = int(rng.choice(cand))
    base = float(tf.texels.ravel()[ci])
    def total_at(value):
        tex = tf.texels.copy()
        tex.ravel()[ci] = value
        t = TransferFunction(tex)
        imgs = _map_ordered(lambda cam: render(volume, t, cam, cfg, threads=1), views, threads)
        d, _ = l1_loss(imgs, refs)
        p, _ = smoothness_prior_tf(t)
        return d + lam * p
    report.gradient_check = _spot_record(f"tf[{ci}]", g0.ravel()[ci], total_at, base, 1e-4)

    state = OptimState(lr=lr)
    data, prior, g = data0, prior0, g0
    for epoch in range(epochs):
        report.loss_trace.append({
            "iter": epoch, "total": data + lam * prior, "data": data, "prior": prior,
        })
        state, texels = adam_step(state, tf.texels, g)
        tf = TransferFunction(project_params(texels, "tf"))
        data, prior, g, imgs = _tf_loss_and_grad(volume, tf, views, refs, lam, cfg, threads)

    report.metrics = {
        "initial_l1": data0,
        "final_l1": data,
        "final_prior": prior,
        "image_psnr": psnr(
            np.concatenate([im.data for im in imgs]),
            np.concatenate([r.data for r in refs]),
        ),
    }
    report.extras = {"tf": tf}
    report.timings = {"total_s": time.perf_counter() - t0}
    return report


# ---------------------------------------------------------------------------
# density reconstruction (absorption-only and color stage)
# ---------------------------------------------------------------------------


def make_absorption_ramp_tf(resolution: int = 64, tau_scale: float = 3.0) -> TransferFunction:
    """Emission-free transfer function with absorption linear in density.

    The first texel is exactly zero, so empty regions absorb nothing even
    inside the clamp-to-edge band of the lookup.
    """
    texels = np.zeros((resolution, 4))
    texels[:, 3] = tau_scale * np.arange(resolution) / max(resolution - 1, 1)
    return TransferFunction(texels)


def preset_tf(name: str, resolution: int = 16, tau_scale: float = 4.0) -> TransferFunction:
    """Stock transfer functions used by the command line and tests.

    ``grayscale``   emission equal to density, absorption ramp (monotone).
    ``warm``        blue-to-red emission sweep with an absorption ramp.
    ``gaussian``    emission/absorption bump around mid density; non-monotonic,
                    so two densities can map to the same color.
    ``absorption``  emission-free ramp (tomography).
    """
    d = (np.arange(resolution) + 0.5) / resolution
    texels = np.zeros((resolution, 4))
    if name == "grayscale":
        texels[:, 0] = texels[:, 1] = texels[:, 2] = d
        texels[:, 3] = tau_scale * d
    elif name == "warm":
        texels[:, 0] = d
        texels[:, 1] = 0.3 + 0.2 * d
        texels[:, 2] = 1.0 - d
        texels[:, 3] = tau_scale * d
    elif name == "gaussian":
        bump = np.exp(-(((d - 0.5) / 0.09) ** 2))
        texels[:, 0] = 0.9 * bump
        texels[:, 1] = 0.6 * bump
        texels[:, 2] = 0.2 * bump
        texels[:, 3] = tau_scale * bump
    elif name == "absorption":
        texels[:, 3] = tau_scale * d
    else:
        raise InvalidInputError(f"unknown transfer-function preset {name!r}")
    return TransferFunction(texels)


def _batch_indices(n_views: int, batch: int, iteration: int):
    batch = min(batch, n_views)
    start = (iteration * batch) % n_views
    return [(start + k) % n_views for k in range(batch)]


def _volume_loss_and_grad(vol_obj, tf, views, refs, idxs, lam, cfg, threads, color):
    sel_views = [views[i] for i in idxs]
    sel_refs = [refs[i] for i in idxs]
    if color:
        imgs = _map_ordered(lambda cam: render_colorvol(vol_obj, cam, cfg, threads=1),
                            sel_views, threads)
    else:
        imgs = _map_ordered(lambda cam: render(vol_obj, tf, cam, cfg, threads=1),
                            sel_views, threads)
    data, seeds = l1_loss(imgs, sel_refs)
    if color:
        grads = _map_ordered(
            lambda k: render_colorvol_adjoint(vol_obj, sel_views[k], cfg, seeds[k],
                                              threads=1, image=imgs[k]),
            range(len(sel_views)), threads,
        )
        g = np.zeros_like(vol_obj.values)
        for gs in grads:
            g += gs.d_color
        prior = 0.0
        pg = np.zeros_like(vol_obj.values)
        for c in range(4):
            pc, pgc = smoothness_prior_volume(vol_obj.values[..., c])
            prior += pc / 4.0
            pg[..., c] = pgc / 4.0
    else:
        grads = _map_ordered(
            lambda k: render_adjoint(vol_obj, tf, sel_views[k], cfg, seeds[k],
                                     threads=1, image=imgs[k]),
            range(len(sel_views)), threads,
        )
        g = np.zeros_like(vol_obj.values)
        for gs in grads:
            g += gs.d_volume
        prior, pg = smoothness_prior_volume(vol_obj)
    return data, prior, g + lam * pg


def _multires_dims(start: int, final: int):
    dims = [start]
    while dims[-1] < final:
        dims.append(dims[-1] * 2)
    if dims[-1] != final:
        raise InvalidInputError("final resolution must be start * 2^k")
    return dims


def _reconstruct_multires(refs, views, tf, *, color: bool, start_dims: int,
                          final_dims: int, iters_per_level: int, final_iters: int,
                          lr: float, batch: int, lam: float, dt: float, box_min, box_max,
                          init_value: float, seed: int, threads: int, report: TaskReport,
                          trace_offset: int = 0):
    """Coarse-to-fine Adam loop shared by the density and color stages."""
    cfg = RenderConfig(dt=dt, target="volume")
    if color:
        shape = (start_dims,) * 3 + (4,)
        vol_obj = ColorVolume(np.full(shape, init_value), box_min, box_max)
        proj = "color"
    else:
        vol_obj = DensityVolume(np.full((start_dims,) * 3, init_value), box_min, box_max)
        proj = "volume"

    levels = _multires_dims(start_dims, final_dims)
    it_global = trace_offset
    for li, dim in enumerate(levels):
        iters = final_iters if li == len(levels) - 1 else iters_per_level
        state = OptimState(lr=lr)
        for it in range(iters):
            idxs = _batch_indices(len(views), batch, it)
            data, prior, g = _volume_loss_and_grad(
                vol_obj, tf, views, refs, idxs, lam, cfg, threads, color
            )
            report.loss_trace.append({
                "iter": it_global, "total": data + lam * prior,
                "data": data, "prior": prior,
            })
            state, vals = adam_step(state, vol_obj.values, g)
            vals = project_params(vals, proj)
            vol_obj = (ColorVolume if color else DensityVolume)(vals, box_min, box_max)
            it_global += 1
        if li != len(levels) - 1:
            vol_obj = upsample_volume(vol_obj)
            vals = project_params(vol_obj.values, proj)
            vol_obj = (ColorVolume if color else DensityVolume)(vals, box_min, box_max)
    return vol_obj, cfg, it_global


def reconstruct_density_absorption(refs, views, *, start_dims: int = 4, final_dims: int = 16,
                                   iters_per_level: int = 10, final_iters: int = 50,
                                   lr: float = 0.3, batch: int = 8, lam: float = 0.5,
                                   dt_voxels: float = 0.2, tf: TransferFunction | None = None,
                                   box_min=(-0.5, -0.5, -0.5), box_max=(0.5, 0.5, 0.5),
                                   init_value: float = 0.5, ground_truth: DensityVolume | None = None,
                                   seed: int = 0, threads: int = 1) -> TaskReport:
    """Absorption-only tomographic reconstruction with resolution doubling.

    The transfer function defaults to an emission-free absorption ramp, which
    makes the image formation monotone in the densities.  The stepsize is
    ``dt_voxels`` finest-level voxel widths and is shared with the reference
    renders.
    """
    if len(refs) != len(views):
        raise InvalidInputError("reference and view counts differ")
    if tf is None:
        tf = make_absorption_ramp_tf()
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    dt = dt_voxels * float(np.min((box_max - box_min) / final_dims))

    t0 = time.perf_counter()
    report = TaskReport(
        task="density-recon", seed=seed,
        config={"start_dims": start_dims, "final_dims": final_dims,
                "iters_per_level": iters_per_level, "final_iters": final_iters,
                "lr": lr, "batch": batch, "lam": lam, "dt": dt, "views": len(views),
                "threads": threads},
    )

    # spot check at the coarse level before optimizing
    cfg0 = RenderConfig(dt=dt, target="volume")
    v0 = DensityVolume(np.full((start_dims,) * 3, init_value), box_min, box_max)
    rng = np.random.default_rng(seed)
    idxs0 = _batch_indices(len(views), batch, 0)
    _, _, g0 = _volume_loss_and_grad(v0, tf, views, refs, idxs0, lam, cfg0, threads, False)
    flat = np.abs(g0).ravel()
    cand = np.flatnonzero(flat >= 0.3 * flat.max()) if flat.max() > 0 else np.array([0])
    ci = int(rng.choice(cand))
    base = float(v0.values.ravel()[ci])
    def total_at(value):
        vals = v0.values.copy()
        vals.ravel()[ci] = value
        v = DensityVolume(vals, box_min, box_max)
        imgs = [render(v, tf, views[i], cfg0, threads=1) for i in idxs0]
        d, _ = l1_loss(imgs, [refs[i] for i in idxs0])
        p, _ = smoothness_prior_volume(v)
        return d + lam * p
    report.gradient_check = _spot_record(f"volume[{ci}]", g0.ravel()[ci], total_at, base, 1e-4)

    vol, cfg, _ = _reconstruct_multires(
        refs, views, tf, color=False, start_dims=start_dims, final_dims=final_dims,
        iters_per_level=iters_per_level, final_iters=final_iters, lr=lr, batch=batch,
        lam=lam, dt=dt, box_min=box_min, box_max=box_max, init_value=init_value,
        seed=seed, threads=threads, report=report,
    )

    report.metrics["final_data"] = report.loss_trace[-1]["data"]
    if ground_truth is not None:
        init_full = DensityVolume(
            np.full((final_dims,) * 3, init_value), box_min, box_max
        )
        report.metrics["psnr_init"] = psnr(init_full, ground_truth)
        report.metrics["psnr_final"] = psnr(vol, ground_truth)
    report.extras = {"volume": vol, "tf": tf, "render_config": cfg}
    report.timings = {"total_s": time.perf_counter() - t0}
    return report


# ---------------------------------------------------------------------------
# color-to-density estimation
# ---------------------------------------------------------------------------


def _neighbor_sums(d: np.ndarray):
    """Per-voxel sum, squared sum and count over the 6-neighborhood."""
    s1 = np.zeros_like(d)
    s2 = np.zeros_like(d)
    cnt = np.zeros_like(d)
    for axis in range(3):
        if d.shape[axis] < 2:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        s1[lo] += d[hi]; s1[hi] += d[lo]
        s2[lo] += d[hi] ** 2; s2[hi] += d[lo] ** 2
        cnt[lo] += 1.0; cnt[hi] += 1.0
    return s1, s2, cnt


def estimate_density_from_colors(colorvol: ColorVolume, tf: TransferFunction, *,
                                 samples: int = 256, alpha_w: float | None = None,
                                 beta_w: float = 1.0, sweeps: int = 50, tol: float = 1e-4,
                                 init: np.ndarray | None = None, seed: int = 0):
    """Per-voxel density whose mapped color best matches the color volume.

    Scores candidates by squared rgb error, a log-compressed absorption error
    and a squared difference to the 6 neighbors (lagged between sweeps).  Each
    sweep draws fresh uniform candidates; the current estimate always
    competes, so the per-voxel cost never increases.  Returns
    ``(DensityVolume, info)``.
    """
    cv = colorvol.values
    c_t = cv[..., :3]
    tau_t = cv[..., 3]
    degenerate = False
    if alpha_w is None:
        m = float(tau_t.max())
        if m <= 0.0:
            alpha_w = 1.0
            degenerate = True
        else:
            alpha_w = 1.0 / m

    rng = np.random.default_rng(seed)
    d = np.zeros(cv.shape[:3]) if init is None else np.asarray(init, dtype=np.float64).copy()

    def match_cost(cand):
        out = tf_sample(tf, cand)
        rgb_err = np.sum((out[..., :3] - c_t) ** 2, axis=-1)
        tau_err = alpha_w * np.log1p(np.abs(out[..., 3] - tau_t))
        return rgb_err + tau_err

    sweeps_run = 0
    last_delta = math.inf
    for _ in range(sweeps):
        s1, s2, cnt = _neighbor_sums(d)
        best_d = d.copy()
        best_cost = match_cost(d) + beta_w * (cnt * d * d - 2.0 * d * s1 + s2)
        for _ in range(samples):
            cand = rng.uniform(0.0, 1.0, size=d.shape)
            cost = match_cost(cand) + beta_w * (cnt * cand * cand - 2.0 * cand * s1 + s2)
            better = cost < best_cost
            best_d = np.where(better, cand, best_d)
            best_cost = np.where(better, cost, best_cost)
        last_delta = float(np.mean(np.abs(best_d - d)))
        d = best_d
        sweeps_run += 1
        if last_delta < tol:
            break
    info = {"sweeps": sweeps_run, "last_delta": last_delta, "degenerate": degenerate,
            "alpha_w": alpha_w, "beta_w": beta_w}
    return DensityVolume(d, colorvol.box_min.copy(), colorvol.box_max.copy()), info


# ---------------------------------------------------------------------------
# emission-absorption density reconstruction
# ---------------------------------------------------------------------------


def reconstruct_density_emission_absorption(refs, views, tf: TransferFunction, *,
                                            start_dims: int = 4, final_dims: int = 16,
                                            iters_per_level: int = 10, final_iters: int = 20,
                                            stage3_iters: int = 50, lr: float = 0.3,
                                            batch: int = 8, lam_color: float = 0.5,
                                            lam_density: float = 20.0, dt_voxels: float = 0.2,
                                            box_min=(-0.5, -0.5, -0.5), box_max=(0.5, 0.5, 0.5),
                                            use_color_init: bool = True,
                                            ground_truth: DensityVolume | None = None,
                                            seed: int = 0, threads: int = 1) -> TaskReport:
    """Density reconstruction through a known, possibly non-monotonic TF.

    Three stages: reconstruct a pre-shaded color volume from the references,
    estimate per-voxel densities matching those colors through the TF, then
    refine the densities end to end through the full rendering pipeline.
    With ``use_color_init=False`` stages 1 and 2 are skipped and stage 3
    starts from seeded random densities, which serves as the baseline that
    exposes the non-convexity.
    """
    if len(refs) != len(views):
        raise InvalidInputError("reference and view counts differ")
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    dt = dt_voxels * float(np.min((box_max - box_min) / final_dims))
    cfg = RenderConfig(dt=dt, target="volume")
    rng = np.random.default_rng(seed)

    t0 = time.perf_counter()
    report = TaskReport(
        task="color-recon", seed=seed,
        config={"start_dims": start_dims, "final_dims": final_dims,
                "iters_per_level": iters_per_level, "final_iters": final_iters,
                "stage3_iters": stage3_iters, "lr": lr, "batch": batch,
                "lam_color": lam_color, "lam_density": lam_density, "dt": dt,
                "use_color_init": use_color_init, "views": len(views), "threads": threads},
    )

    stage_metrics = {}
    if use_color_init:
        t_s1 = time.perf_counter()
        colorvol, _, off = _reconstruct_multires(
            refs, views, None, color=True, start_dims=start_dims, final_dims=final_dims,
            iters_per_level=iters_per_level, final_iters=final_iters, lr=lr, batch=batch,
            lam=lam_color, dt=dt, box_min=box_min, box_max=box_max, init_value=0.1,
            seed=seed, threads=threads, report=report,
        )
        stage_metrics["stage1_final_data"] = report.loss_trace[-1]["data"]
        stage_metrics["stage1_s"] = time.perf_counter() - t_s1

        t_s2 = time.perf_counter()
        dens0, est_info = estimate_density_from_colors(colorvol, tf, seed=seed)
        stage_metrics["stage2"] = est_info
        stage_metrics["stage2_s"] = time.perf_counter() - t_s2
        init_values = dens0.values
        report.extras["colorvol"] = colorvol
    else:
        off = 0
        init_values = rng.uniform(0.0, 1.0, size=(final_dims,) * 3)

    vol = DensityVolume(project_params(init_values, "volume"), box_min, box_max)
    state = OptimState(lr=lr)
    t_s3 = time.perf_counter()
    for it in range(stage3_iters):
        idxs = _batch_indices(len(views), batch, it)
        data, prior, g = _volume_loss_and_grad(
            vol, tf, views, refs, idxs, lam_density, cfg, threads, False
        )
        report.loss_trace.append({
            "iter": off + it, "total": data + lam_density * prior,
            "data": data, "prior": prior,
        })
        state, vals = adam_step(state, vol.values, g)
        vol = DensityVolume(project_params(vals, "volume"), box_min, box_max)
    stage_metrics["stage3_s"] = time.perf_counter() - t_s3

    imgs = _map_ordered(lambda cam: render(vol, tf, cam, cfg, threads=1), views, threads)
    final_l1, _ = l1_loss(imgs, refs)
    report.metrics = {"final_l1": final_l1, **stage_metrics}
    if ground_truth is not None:
        report.metrics["psnr_final"] = psnr(vol, ground_truth)

    # spot check on one stage-3 coordinate at the final volume
    idxs0 = _batch_indices(len(views), batch, 0)
    _, _, g0 = _volume_loss_and_grad(vol, tf, views, refs, idxs0, lam_density, cfg, threads, False)
    flat = np.abs(g0).ravel()
    interior = (vol.values.ravel() > 1e-3) & (vol.values.ravel() < 1.0 - 1e-3)
    cand = np.flatnonzero((flat >= 0.3 * flat.max()) & interior) if flat.max() > 0 else np.array([])
    if cand.size == 0:
        cand = np.flatnonzero(interior)
    if cand.size:
        ci = int(rng.choice(cand))
        base = float(vol.values.ravel()[ci])
        def total_at(value):
            vals = vol.values.copy()
            vals.ravel()[ci] = value
            v = DensityVolume(vals, box_min, box_max)
            ims = [render(v, tf, views[i], cfg, threads=1) for i in idxs0]
            dd, _ = l1_loss(ims, [refs[i] for i in idxs0])
            pp, _ = smoothness_prior_volume(v)
            return dd + lam_density * pp
        report.gradient_check = _spot_record(
            f"volume[{ci}]", g0.ravel()[ci], total_at, base, 1e-4)

    report.extras["volume"] = vol
    report.timings = {"total_s": time.perf_counter() - t0}
    return report


# ---------------------------------------------------------------------------
# 1D non-convexity demonstration
# ---------------------------------------------------------------------------


def _render_segment(d1, d0, n_samples, dt, sigma2, tau_scale):
    """March a 1D segment with endpoint densities (d0, d1), generic over duals."""
    rgb = [0.0, 0.0, 0.0]
    alpha = 0.0
    inv2s = 1.0 / (2.0 * sigma2)
    for i in range(n_samples):
        t = (i + 0.5) * dt
        dens = d0 + (d1 - d0) * t
        g = ad.exp(-(dens * dens) * inv2s)
        tau = tau_scale * g
        a = 1.0 - ad.exp(-(dt * tau))
        one_m = 1.0 - alpha
        for k in range(3):
            rgb[k] = rgb[k] + one_m * (a * g)
        alpha = alpha + one_m * a
    return rgb, alpha


def gaussian_1d_demo(*, d0: float = -1.0, truth: float = -1.0, sweep=None,
                     n_samples: int = 64, sigma2: float = 0.5,
                     tau_scale: float = 1.0, seed: int = 0) -> TaskReport:
    """Loss landscape of a single endpoint density on a 1D segment.

    The segment interpolates linearly between ``d0`` and the swept value; a
    zero-mean Gaussian maps density to grayscale emission with absorption
    proportional to it.  Emits the squared rgba error against the truth
    rendering and its exact derivative at every sweep point.
    """
    if sweep is None:
        sweep = np.linspace(-2.0, 2.0, 161)
    sweep = np.asarray(sweep, dtype=np.float64)
    dt = 1.0 / n_samples

    rgb_t, a_t = _render_segment(truth, d0, n_samples, dt, sigma2, tau_scale)
    target = np.array([*rgb_t, a_t])

    rows = []
    for d1 in sweep:
        dd = ad.Dual.seed(float(d1), 0, 1)
        rgb, alpha = _render_segment(dd, d0, n_samples, dt, sigma2, tau_scale)
        loss = 0.0
        for k in range(3):
            loss = loss + (rgb[k] - target[k]) ** 2
        loss = loss + (alpha - target[3]) ** 2
        rows.append((float(d1), float(ad.value_of(loss)),
                     float(ad.derivative_of(loss, 1)[0])))

    report = TaskReport(
        task="demo-1d", seed=seed,
        config={"d0": d0, "truth": truth, "n_samples": n_samples,
                "sigma2": sigma2, "tau_scale": tau_scale},
    )
    for i, (d1, loss, grad) in enumerate(rows):
        report.loss_trace.append({"iter": i, "total": loss, "data": loss, "prior": 0.0})
    report.extras = {"rows": rows}
    # sign flips of the gradient strictly inside (0, 1)
    flips = []
    for (a1, _, g1), (a2, _, g2) in zip(rows[:-1], rows[1:]):
        if 0.0 < a1 and a2 < 1.0 and g1 * g2 < 0.0:
            flips.append(0.5 * (a1 + a2))
    report.metrics = {
        "loss_at_truth": min(rows, key=lambda r: abs(r[0] - truth))[1],
        "sign_flips_in_unit": flips,
    }
    return report
