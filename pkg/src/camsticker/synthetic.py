"""Synthetic scenes and capture pairs with known ground truth."""

import numpy as np
from scipy.ndimage import gaussian_filter

from .calib import CapturePair, ColorCalibration, SharedDotShape
from .perturb import DotParams, apply_dot


def textured_scene(rng, height, width, smooth=6.0):
    """Smooth random colour texture in [0.05, 0.95]."""
    noise = rng.random((height, width, 3))
    tex = np.stack([gaussian_filter(noise[..., c], smooth, mode="wrap") for c in range(3)], axis=-1)
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12)
    fine = np.stack([gaussian_filter(rng.random((height, width)), 1.5) for _ in range(3)], axis=-1)
    fine = (fine - fine.min()) / max(np.ptp(fine), 1e-12)
    return 0.05 + 0.9 * (0.75 * tex + 0.25 * fine)


def synthetic_capture_pair(
    rng,
    size=224,
    shape=SharedDotShape(),
    calibration=ColorCalibration(),
    hint_error=5.0,
    color_error=0.05,
    margin=None,
):
    """A clean/dotted pair rendered with a known dot; returns (pair, true_dot).

    The printed color maps through ``calibration`` to within ``color_error`` of
    the true observed color, and the center hint lies ``hint_error`` px away.
    """
    margin = shape.radius if margin is None else margin
    clean = textured_scene(rng, size, size)
    center = tuple(rng.uniform(margin, size - 1 - margin, 2))
    printed = rng.uniform(0.1, 0.9, 3)
    observed = np.clip(calibration.apply(printed) + rng.uniform(-color_error, color_error, 3), 0, 1)
    true = DotParams(tuple(observed), center, shape.radius, shape.alpha_max, shape.beta)
    dotted = apply_dot(clean, true)
    angle = rng.uniform(0, 2 * np.pi)
    hint = (center[0] + hint_error * np.cos(angle), center[1] + hint_error * np.sin(angle))
    return CapturePair(clean, dotted, hint, tuple(printed)), true
