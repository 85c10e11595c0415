"""Differentiable direct volume rendering with exact gradients.

An emission-absorption ray marcher whose image can be differentiated with
respect to the camera pose, the integration stepsize, the transfer function
and the per-voxel densities, either by forward-mode dual numbers (few
parameters) or by a hand-derived adjoint pass whose memory stays independent
of the step count thanks to the invertibility of front-to-back compositing.
On top sit gradient-based pipelines for viewpoint selection, transfer
function reconstruction and tomographic density reconstruction.
"""

from .errors import (
    CorruptFileError,
    DomainError,
    InvalidInputError,
    InvalidParameterError,
    MissingMetadataError,
    NumericalAbortError,
    UnsupportedConfigurationError,
    VoldiffError,
)
from .field import (
    EPS_ALPHA,
    EPS_POLE_DEG,
    ColorVolume,
    DensityVolume,
    Ray,
    SphericalCamera,
    TransferFunction,
    camera_from_sphere,
    camera_gradients,
    opacity_from_density,
    tf_gradients,
    tf_sample,
    trilinear_gradients,
    trilinear_sample,
)
from .autodiff import Dual
from .renderer import (
    GradientSet,
    ImageRGBA,
    RenderConfig,
    blend,
    blend_adjoint,
    blend_invert,
    render,
    render_adjoint,
    render_colorvol,
    render_colorvol_adjoint,
    render_forward_grad,
)
from .objectives import (
    LossValue,
    l1_loss,
    opacity_entropy,
    psnr,
    smoothness_prior_tf,
    smoothness_prior_volume,
    ssim,
)
from .optim import OptimState, adam_step, gd_step, project_params, upsample_volume
from .phantoms import make_phantom
from .tasks import (
    TaskReport,
    estimate_density_from_colors,
    fibonacci_views,
    gaussian_1d_demo,
    make_absorption_ramp_tf,
    optimize_viewpoint,
    preset_tf,
    reconstruct_density_absorption,
    reconstruct_density_emission_absorption,
    reconstruct_tf,
    render_references,
)

__version__ = "0.1.0"

__all__ = [
    "ColorVolume", "DensityVolume", "Dual", "GradientSet", "ImageRGBA",
    "LossValue", "OptimState", "Ray", "RenderConfig", "SphericalCamera",
    "TaskReport", "TransferFunction",
    "EPS_ALPHA", "EPS_POLE_DEG",
    "adam_step", "blend", "blend_adjoint", "blend_invert",
    "camera_from_sphere", "camera_gradients", "estimate_density_from_colors",
    "fibonacci_views", "gaussian_1d_demo", "gd_step", "l1_loss",
    "make_absorption_ramp_tf", "make_phantom", "opacity_entropy",
    "opacity_from_density", "optimize_viewpoint", "preset_tf",
    "project_params", "psnr", "reconstruct_density_absorption",
    "reconstruct_density_emission_absorption", "reconstruct_tf", "render",
    "render_adjoint", "render_colorvol", "render_colorvol_adjoint",
    "render_forward_grad", "render_references", "smoothness_prior_tf",
    "smoothness_prior_volume", "ssim", "tf_gradients", "tf_sample",
    "trilinear_gradients", "trilinear_sample", "upsample_volume",
    "CorruptFileError", "DomainError", "InvalidInputError",
    "InvalidParameterError", "MissingMetadataError", "NumericalAbortError",
    "UnsupportedConfigurationError", "VoldiffError",
]
