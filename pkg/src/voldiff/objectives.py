"""Image-space losses, smoothing priors, opacity entropy and quality metrics.

Every differentiable objective returns its value together with the adjoint
seed (the gradient with respect to its direct input), sized so that seeds can
be handed straight to the renderer's adjoint pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import InvalidInputError
from .field import DensityVolume, TransferFunction
from .renderer import ImageRGBA

# finite stand-in for the entropy gradient's log singularity at p=0
_ENTROPY_GRAD_BOUND = 1e6


@dataclass
class LossValue:
    """Total objective with its named components and image-space seeds."""

    total: float
    data: float
    prior: float
    lam: float
    seeds: list = dc_field(default_factory=list)


def _image_array(img) -> np.ndarray:
    return img.data if isinstance(img, ImageRGBA) else np.asarray(img, dtype=np.float64)


def l1_loss(images, refs):
    """Mean absolute difference over images, pixels and channels.

    Returns ``(value, seeds)`` where each seed is sign(x - y) scaled by the
    normalizer 1 / (N * W * H * 4); sign(0) is taken as 0.
    """
    if len(images) != len(refs):
        raise InvalidInputError("image and reference counts differ")
    xs = [_image_array(im) for im in images]
    ys = [_image_array(r) for r in refs]
    for x, y in zip(xs, ys):
        if x.shape != y.shape:
            raise InvalidInputError(f"image shape {x.shape} != reference shape {y.shape}")
    count = sum(x.size for x in xs)
    total = sum(float(np.sum(np.abs(x - y))) for x, y in zip(xs, ys)) / count
    seeds = [np.sign(x - y) / count for x, y in zip(xs, ys)]
    return total, seeds


def smoothness_prior_tf(tf: TransferFunction):
    """Mean squared difference of adjacent texels over the 4 channels."""
    t = tf.texels
    R = t.shape[0]
    if R < 2:
        return 0.0, np.zeros_like(t)
    d = t[1:] - t[:-1]
    norm = 4.0 * (R - 1)
    value = float(np.sum(d * d)) / norm
    grad = np.zeros_like(t)
    grad[:-1] -= 2.0 * d / norm
    grad[1:] += 2.0 * d / norm
    return value, grad


def smoothness_prior_volume(volume):
    """Mean squared forward difference along the three grid axes."""
    v = volume.values if isinstance(volume, DensityVolume) else np.asarray(volume, dtype=np.float64)
    grad = np.zeros_like(v)
    total = 0.0
    count = 0
    for axis in range(3):
        if v.shape[axis] < 2:
            continue
        lo = [slice(None)] * v.ndim
        hi = [slice(None)] * v.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        d = v[tuple(hi)] - v[tuple(lo)]
        total += float(np.sum(d * d))
        count += d.size
        grad[tuple(lo)] -= 2.0 * d
        grad[tuple(hi)] += 2.0 * d
    if count == 0:
        return 0.0, grad
    return total / count, grad / count


def opacity_entropy(image):
    """Normalized Shannon entropy of the alpha channel.

    Treats the alpha values as an unnormalized distribution: p_i = a_i / sum,
    H = -(1/log2 N) * sum p_i log2 p_i, with 0 log 0 := 0.  Returns
    ``(value, seed, degenerate)`` where the seed is an image-shaped gradient
    with only its alpha channel populated.  The all-zero alpha case is
    degenerate and yields H = 0 with a zero gradient.
    """
    data = _image_array(image)
    a = data[..., 3]
    n = a.size
    seed = np.zeros_like(data)
    s = float(np.sum(a))
    if s <= 0.0 or n < 2:
        return 0.0, seed, True
    p = a / s
    log_n = math.log2(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.log(p) / math.log(2.0)
    logp = np.where(p > 0.0, logp, 0.0)
    h = -float(np.sum(p * logp)) / log_n
    # dH/da_k = -(log2 p_k - sum_i p_i log2 p_i) / (S log2 N)
    f = float(np.sum(p * logp))
    with np.errstate(divide="ignore"):
        logp_full = np.log(p) / math.log(2.0)
    grad = -(logp_full - f) / (s * log_n)
    grad = np.clip(np.nan_to_num(grad, nan=_ENTROPY_GRAD_BOUND, posinf=_ENTROPY_GRAD_BOUND,
                                 neginf=-_ENTROPY_GRAD_BOUND),
                   -_ENTROPY_GRAD_BOUND, _ENTROPY_GRAD_BOUND)
    seed[..., 3] = grad
    return h, seed, False


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; equal inputs yield +inf."""
    x = a.values if isinstance(a, DensityVolume) else _image_array(a)
    y = b.values if isinstance(b, DensityVolume) else _image_array(b)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _luminance(data: np.ndarray) -> np.ndarray:
    return 0.299 * data[..., 0] + 0.587 * data[..., 1] + 0.114 * data[..., 2]


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1D kernel on both axes."""
    size = kernel.shape[0]
    h, w = img.shape
    rows = np.zeros((h, w - size + 1))
    for i, kv in enumerate(kernel):
        rows += kv * img[:, i:i + w - size + 1]
    out = np.zeros((h - size + 1, w - size + 1))
    for i, kv in enumerate(kernel):
        out += kv * rows[i:i + h - size + 1, :]
    return out


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Single-scale structural similarity on the luminance of rgb.

    Uses the customary 11x11 Gaussian window with sigma 1.5.  Images smaller
    than the window fall back to global statistics over all pixels.
    """
    x = _image_array(a)
    y = _image_array(b)
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch {x.shape} vs {y.shape}")
    lx = _luminance(x)
    ly = _luminance(y)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    size = 11
    if min(lx.shape) < size:
        mx, my = float(lx.mean()), float(ly.mean())
        vx, vy = float(lx.var()), float(ly.var())
        cov = float(np.mean((lx - mx) * (ly - my)))
        return ((2 * mx * my + c1) * (2 * cov + c2)) / (
            (mx * mx + my * my + c1) * (vx + vy + c2)
        )
    kern = _gaussian_kernel(size)
    mx = _windowed(lx, kern)
    my = _windowed(ly, kern)
    mxx = _windowed(lx * lx, kern)
    myy = _windowed(ly * ly, kern)
    mxy = _windowed(lx * ly, kern)
    vx = mxx - mx * mx
    vy = myy - my * my
    cov = mxy - mx * my
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def combine(data: float, data_seeds, prior: float, lam: float) -> LossValue:
    """Assemble the standard data + lam * prior objective."""
    return LossValue(
        total=data + lam * prior, data=data, prior=prior, lam=lam, seeds=list(data_seeds)
    )
