"""Randomized parity harness: adjoint vs forward mode vs finite differences.

Builds small random scenes and compares, for every differentiation target,
the adjoint gradient of a scalar image loss against central finite
differences of the undifferentiated renderer, and forward-mode gradients
against the adjoint where forward mode applies.

The finite-difference side only ever calls ``render``, so it stays
independent of both analytic paths.  Because the transfer function is
piecewise linear, a loss is continuous but kinked wherever a sample density
crosses a texel node; an FD bracket that straddles such a kink measures a
slope average rather than the one-sided derivative.  Every FD estimate is
therefore validated by self-consistency between step sizes h and h/4, and
scenes with contaminated brackets are redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import DensityVolume, SphericalCamera, TransferFunction
from .objectives import l1_loss, opacity_entropy
from .renderer import RenderConfig, render, render_adjoint, render_forward_grad

_FD_STEPS = {"camera": 1e-4, "stepsize": 1e-6, "tf": 1e-5, "volume": 1e-5}
_FD_CONSISTENCY = 2e-4


@dataclass
class Scene:
    volume: DensityVolume
    tf: TransferFunction
    cam: SphericalCamera
    dt: float
    ref: np.ndarray
    memory_mode: str = "inversion"

    def config(self, target):
        return RenderConfig(dt=self.dt, target=target, memory_mode=self.memory_mode)


def random_scene(seed: int, *, dims: int = 8, image: int = 8, tf_res: int = 8,
                 steps: int = 16) -> Scene:
    """Random volume, transfer function, camera pose and reference image.

    Parameter draws stay away from the [0, 1] clamp boundaries so central
    differences probe the differentiable interior.
    """
    rng = np.random.default_rng(seed)
    volume = DensityVolume(rng.uniform(0.1, 0.9, (dims, dims, dims)))
    texels = np.column_stack([
        rng.uniform(0.05, 1.0, (tf_res, 3)).reshape(tf_res, 3),
        rng.uniform(0.3, 2.5, tf_res),
    ])
    tf = TransferFunction(texels)
    cam = SphericalCamera(
        lon_deg=rng.uniform(0.0, 360.0),
        lat_deg=rng.uniform(-60.0, 60.0),
        radius=rng.uniform(2.0, 3.0),
        fov_y_deg=rng.uniform(25.0, 40.0),
        width=image, height=image,
    )
    # chord through the unit box is at most sqrt(3); pick dt for ~steps samples
    dt = float(np.sqrt(3.0)) / steps * rng.uniform(0.8, 1.2)
    ref = rng.uniform(0.0, 1.0, (image, image, 4))
    return Scene(volume, tf, cam, dt, ref)


def _loss_and_seed(img, loss: str, ref):
    if loss == "l1":
        value, seeds = l1_loss([img], [ref])
        return value, seeds[0]
    if loss == "entropy":
        value, seed, _ = opacity_entropy(img)
        return value, seed
    raise ValueError(f"unknown loss {loss!r}")


def _loss_value(scene: Scene, target: str, loss: str, *, volume=None, tf=None,
                cam=None, dt=None) -> float:
    cfg = RenderConfig(dt=scene.dt if dt is None else dt, target=target)
    img = render(volume or scene.volume, tf or scene.tf, cam or scene.cam, cfg)
    value, _ = _loss_and_seed(img, loss, scene.ref)
    return value


def rel_error(a, b, floor: float = 1e-9) -> float:
    """Max-norm deviation of ``a`` from reference ``b``, relative to ``b``."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    scale = max(float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale


def adjoint_gradient(scene: Scene, target: str, loss: str):
    cfg = scene.config(target)
    img = render(scene.volume, scene.tf, scene.cam, cfg)
    _, seed = _loss_and_seed(img, loss, scene.ref)
    g = render_adjoint(scene.volume, scene.tf, scene.cam, cfg, seed)
    return {
        "camera": lambda: g.d_camera,
        "stepsize": lambda: np.array([g.d_stepsize]),
        "tf": lambda: g.d_tf,
        "volume": lambda: g.d_volume,
    }[target]()


def forward_gradient(scene: Scene, target: str, loss: str):
    cfg = scene.config(target)
    img, jac = render_forward_grad(scene.volume, scene.tf, scene.cam, cfg)
    _, seed = _loss_and_seed(img, loss, scene.ref)
    p = jac.shape[-1]
    return np.array([float(np.sum(seed * jac[..., i])) for i in range(p)])


def _cam_with(cam: SphericalCamera, lon, lat) -> SphericalCamera:
    return SphericalCamera(lon, lat, cam.radius, cam.center, cam.fov_y_deg,
                           cam.width, cam.height)


def _fd_once(scene: Scene, target: str, loss: str, h: float, coords):
    if target == "camera":
        out = np.zeros(2)
        lon, lat = scene.cam.lon_deg, scene.cam.lat_deg
        out[0] = (
            _loss_value(scene, target, loss, cam=_cam_with(scene.cam, lon + h, lat))
            - _loss_value(scene, target, loss, cam=_cam_with(scene.cam, lon - h, lat))
        ) / (2 * h)
        out[1] = (
            _loss_value(scene, target, loss, cam=_cam_with(scene.cam, lon, lat + h))
            - _loss_value(scene, target, loss, cam=_cam_with(scene.cam, lon, lat - h))
        ) / (2 * h)
        return out
    if target == "stepsize":
        fp = _loss_value(scene, target, loss, dt=scene.dt + h)
        fm = _loss_value(scene, target, loss, dt=scene.dt - h)
        return np.array([(fp - fm) / (2 * h)])
    if target == "tf":
        arr = scene.tf.texels
        make = lambda a: dict(tf=TransferFunction(a))
    else:
        arr = scene.volume.values
        make = lambda a: dict(volume=DensityVolume(a, scene.volume.box_min,
                                                   scene.volume.box_max))
    out = np.zeros(len(coords))
    for k, ci in enumerate(coords):
        a_p = arr.copy(); a_p.ravel()[ci] += h
        a_m = arr.copy(); a_m.ravel()[ci] -= h
        out[k] = (
            _loss_value(scene, target, loss, **make(a_p))
            - _loss_value(scene, target, loss, **make(a_m))
        ) / (2 * h)
    return out


def fd_gradient(scene: Scene, target: str, loss: str, coords=None, rng=None):
    """Central finite differences plus a Richardson-style stability flag.

    Returns ``(fd, coords, stable)``.  ``stable`` is False when the h and
    h/4 estimates disagree, which indicates the bracket straddles a kink of
    the piecewise-linear transfer function; such estimates are not valid
    derivative references.
    """
    h = _FD_STEPS[target]
    if target in ("tf", "volume"):
        arr = scene.tf.texels if target == "tf" else scene.volume.values
        if coords is None:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(arr.size, size=min(8, arr.size), replace=False)
    fd_coarse = _fd_once(scene, target, loss, h, coords)
    fd_fine = _fd_once(scene, target, loss, h / 4.0, coords)
    stable = rel_error(fd_coarse, fd_fine) <= _FD_CONSISTENCY
    return fd_fine, (None if target in ("camera", "stepsize") else np.asarray(coords)), stable


def check_scene(scene: Scene, *, losses=("l1", "entropy"), rng=None):
    """Parity rows for one scene: every target under every loss."""
    rng = rng or np.random.default_rng(0)
    rows = []
    for loss in losses:
        for target in ("camera", "stepsize", "tf", "volume"):
            adj = adjoint_gradient(scene, target, loss)
            fd, picked, stable = fd_gradient(scene, target, loss, rng=rng)
            adj_sel = adj if picked is None else adj.ravel()[picked]
            row = {
                "target": target,
                "loss": loss,
                "rel_fd": rel_error(adj_sel, fd),
                "fd_stable": stable,
                "rel_forward": None,
            }
            if target in ("camera", "stepsize"):
                fwd = forward_gradient(scene, target, loss)
                row["rel_forward"] = rel_error(fwd, adj)
            rows.append(row)
    return rows


def run_gradcheck(*, n_scenes: int = 20, seed: int = 0, losses=("l1", "entropy"),
                  dims: int = 8, image: int = 8, steps: int = 16,
                  max_attempts: int = 6):
    """Parity sweep over ``n_scenes`` valid scenes; returns ``(rows, summary)``.

    A scene whose FD brackets are kink-contaminated (unstable under step
    refinement) is replaced by a redraw, up to ``max_attempts`` per slot;
    if no clean bracket is found the last attempt is kept and flagged.
    """
    rows = []
    redraws = 0
    rng = np.random.default_rng(seed)
    for s in range(n_scenes):
        tf_res = 2 if s % 2 == 0 else 8
        scene_rows = None
        for attempt in range(max_attempts):
            scene = random_scene(seed * 100003 + s + attempt * 77777,
                                 dims=dims, image=image, tf_res=tf_res, steps=steps)
            cand = check_scene(scene, losses=losses, rng=rng)
            if all(r["fd_stable"] for r in cand):
                scene_rows = cand
                break
            redraws += 1
        if scene_rows is None:
            scene_rows = cand
        for row in scene_rows:
            row["scene"] = s
            rows.append(row)
    stable_rows = [r for r in rows if r["fd_stable"]]
    summary = {
        "max_rel_fd": max(r["rel_fd"] for r in stable_rows),
        "max_rel_forward": max(r["rel_forward"] for r in rows
                               if r["rel_forward"] is not None),
        "scenes": n_scenes,
        "redraws": redraws,
        "unstable_rows": len(rows) - len(stable_rows),
    }
    return rows, summary
