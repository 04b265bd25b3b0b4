"""Adversarial camera stickers: translucent-dot perturbations, threat-model
fitting, targeted universal attacks and evaluation."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND
from .perturb import (
    DotGradient,
    DotParams,
    StickerPattern,
    alpha_mask,
    apply_dot,
    apply_pattern,
    apply_pattern_batch,
    pattern_gradient,
    render_preview,
)
from .ssim import ssim, ssim_pixel_gradient

__all__ = [
    "KERNEL_BACKEND",
    "DotGradient",
    "DotParams",
    "StickerPattern",
    "alpha_mask",
    "apply_dot",
    "apply_pattern",
    "apply_pattern_batch",
    "pattern_gradient",
    "render_preview",
    "ssim",
    "ssim_pixel_gradient",
]
