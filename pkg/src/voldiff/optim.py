"""First-order optimizers, parameter projection and volume upsampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, NumericalAbortError
from .field import ColorVolume, DensityVolume

TAU_MAX_DEFAULT = 100.0


@dataclass
class OptimState:
    """Adam moment accumulators for one parameter vector."""

    lr: float
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _check_grads(grads: np.ndarray):
    if not np.all(np.isfinite(grads)):
        raise NumericalAbortError("non-finite gradients passed to the optimizer")


def gd_step(params, grads, lr: float):
    """Plain gradient descent update."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise InvalidParameterError("parameter/gradient shape mismatch")
    if lr <= 0.0:
        raise InvalidParameterError("learning rate must be positive")
    _check_grads(grads)
    return params - lr * grads


def adam_step(state: OptimState, params, grads):
    """One Adam update with bias correction; returns ``(state, params)``.

    The returned state is a new object so callers can keep trajectories.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise InvalidParameterError("parameter/gradient shape mismatch")
    _check_grads(grads)
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    t = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grads
    v = state.beta2 * v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimState(
        lr=state.lr, m=m, v=v, step=t,
        beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )
    return new_state, new_params


def project_params(params, target: str, tau_max: float = TAU_MAX_DEFAULT):
    """Clamp parameters back into their physical range; idempotent.

    ``tf``: emission channels to >= 0, absorption to [0, tau_max].
    ``volume``: densities to [0, 1].
    ``color``: per-voxel rgb to >= 0, absorption to [0, tau_max].
    """
    params = np.asarray(params, dtype=np.float64)
    out = params.copy()
    if target == "tf":
        out[..., :3] = np.maximum(out[..., :3], 0.0)
        out[..., 3] = np.clip(out[..., 3], 0.0, tau_max)
    elif target == "volume":
        out = np.clip(out, 0.0, 1.0)
    elif target == "color":
        out[..., :3] = np.maximum(out[..., :3], 0.0)
        out[..., 3] = np.clip(out[..., 3], 0.0, tau_max)
    else:
        raise InvalidParameterError(f"unknown projection target {target!r}")
    return out


def _upsample_axis(values: np.ndarray, axis: int) -> np.ndarray:
    """Double one axis by linear interpolation at the fine cell centers.

    Fine node j sits at coarse grid coordinate (j - 0.5) / 2; the boundary
    half-cells extrapolate the edge slope so multilinear fields are
    reproduced exactly everywhere.
    """
    n = values.shape[axis]
    g = (np.arange(2 * n) - 0.5) / 2.0
    i0 = np.clip(np.floor(g).astype(np.intp), 0, max(n - 2, 0))
    f = g - i0
    i1 = np.minimum(i0 + 1, n - 1)
    v0 = np.take(values, i0, axis=axis)
    v1 = np.take(values, i1, axis=axis)
    shape = [1] * values.ndim
    shape[axis] = 2 * n
    f = f.reshape(shape)
    if n == 1:
        return np.repeat(values, 2, axis=axis)
    return (1.0 - f) * v0 + f * v1


def upsample_volume(volume):
    """Double the grid resolution on each axis, world box unchanged.

    Works on :class:`DensityVolume` and :class:`ColorVolume` (channel-wise).
    """
    if isinstance(volume, DensityVolume):
        vals = volume.values
        for axis in range(3):
            vals = _upsample_axis(vals, axis)
        return DensityVolume(vals, volume.box_min.copy(), volume.box_max.copy())
    if isinstance(volume, ColorVolume):
        vals = volume.values
        for axis in range(3):
            vals = _upsample_axis(vals, axis)
        return ColorVolume(vals, volume.box_min.copy(), volume.box_max.copy())
    raise InvalidParameterError("upsample_volume expects a density or color volume")
