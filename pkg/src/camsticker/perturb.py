"""Translucent-dot perturbation model.

A dot blends a colour into the image with a radially decaying alpha mask::

    alpha(i, j) = alpha_max * exp(-d ** beta),  d = ((i - ci)**2 + (j - cj)**2) / r**2
    out(i, j)   = (1 - alpha) * x(i, j) + alpha * color

Pixel (i, j) is sampled at integer coordinates, row-major, origin top-left.
A pattern applies its dots in order, dot 0 first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import kernels

ALPHA_CUTOFF = 1e-8
DEFAULT_MAX_DOTS = 10


def check_image(x, name="image") -> np.ndarray:
    """Validate an (H, W, 3) image with channels in [0, 1]; returns float64 view/copy."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"{name} must be at least 1x1")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ValueError(f"{name} channels must lie in [0, 1]")
    return x


def blank_image(height, width, value=1.0) -> np.ndarray:
    return np.full((height, width, 3), float(value))


@dataclass(frozen=True)
class DotParams:
    color: tuple[float, float, float]
    center: tuple[float, float]
    radius: float
    alpha_max: float
    beta: float

    def __post_init__(self):
        color = tuple(float(c) for c in self.color)
        center = tuple(float(c) for c in self.center)
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "alpha_max", float(self.alpha_max))
        object.__setattr__(self, "beta", float(self.beta))
        if len(color) != 3 or any(not 0.0 <= c <= 1.0 for c in color):
            raise ValueError(f"color must be an RGB triple in [0, 1], got {color}")
        if len(center) != 2 or not all(math.isfinite(c) for c in center):
            raise ValueError(f"center must be a finite (i, j) pair, got {center}")
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ValueError(f"radius must be > 0, got {self.radius}")
        if not 0.0 <= self.alpha_max <= 1.0:
            raise ValueError(f"alpha_max must be in [0, 1], got {self.alpha_max}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be > 0, got {self.beta}")

    # vector layout: color(3), center(2), radius, alpha_max, beta
    def as_vector(self) -> np.ndarray:
        return np.array([*self.color, *self.center, self.radius, self.alpha_max, self.beta])

    @classmethod
    def from_vector(cls, v) -> "DotParams":
        v = [float(t) for t in v]
        return cls(tuple(v[0:3]), (v[3], v[4]), v[5], v[6], v[7])

    def with_center(self, i, j) -> "DotParams":
        return replace(self, center=(float(i), float(j)))

    def to_dict(self) -> dict:
        return {
            "color": list(self.color),
            "center": list(self.center),
            "radius": self.radius,
            "alpha_max": self.alpha_max,
            "beta": self.beta,
        }

    @classmethod
    def from_dict(cls, d) -> "DotParams":
        return cls(tuple(d["color"]), tuple(d["center"]), d["radius"], d["alpha_max"], d["beta"])


@dataclass(frozen=True)
class StickerPattern:
    dots: tuple[DotParams, ...] = ()
    max_dots: int = DEFAULT_MAX_DOTS

    def __post_init__(self):
        object.__setattr__(self, "dots", tuple(self.dots))
        if len(self.dots) > self.max_dots:
            raise ValueError(f"pattern has {len(self.dots)} dots, maximum is {self.max_dots}")

    def __len__(self):
        return len(self.dots)

    def __iter__(self):
        return iter(self.dots)

    def replace_dot(self, k, dot) -> "StickerPattern":
        dots = list(self.dots)
        dots[k] = dot
        return StickerPattern(tuple(dots), self.max_dots)

    def to_dict(self) -> dict:
        return {"max_dots": self.max_dots, "dots": [d.to_dict() for d in self.dots]}

    @classmethod
    def from_dict(cls, d) -> "StickerPattern":
        return cls(tuple(DotParams.from_dict(x) for x in d["dots"]), int(d.get("max_dots", DEFAULT_MAX_DOTS)))


@dataclass
class DotGradient:
    d_color: np.ndarray
    d_center: np.ndarray
    d_radius: float
    d_alpha_max: float
    d_beta: float

    def as_vector(self) -> np.ndarray:
        return np.array([*self.d_color, *self.d_center, self.d_radius, self.d_alpha_max, self.d_beta])

    @classmethod
    def from_vector(cls, v) -> "DotGradient":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[0:3].copy(), v[3:5].copy(), float(v[5]), float(v[6]), float(v[7]))


def support_radius(dot: DotParams, cutoff=ALPHA_CUTOFF) -> float:
    """Distance beyond which alpha drops below ``cutoff``."""
    if dot.alpha_max <= cutoff:
        return 0.0
    return dot.radius * math.log(dot.alpha_max / cutoff) ** (0.5 / dot.beta)


def dot_bbox(dot: DotParams, height, width, cutoff=ALPHA_CUTOFF):
    """Half-open (i0, i1, j0, j1) pixel box holding every pixel with alpha >= cutoff."""
    R = support_radius(dot, cutoff)
    if R <= 0.0:
        return 0, 0, 0, 0
    ci, cj = dot.center
    i0 = max(int(math.ceil(ci - R)), 0)
    i1 = min(int(math.floor(ci + R)) + 1, height)
    j0 = max(int(math.ceil(cj - R)), 0)
    j1 = min(int(math.floor(cj + R)) + 1, width)
    if i1 <= i0 or j1 <= j0:
        return 0, 0, 0, 0
    return i0, i1, j0, j1


def _kernel_args(dot: DotParams):
    return (dot.center[0], dot.center[1], dot.radius, dot.alpha_max, dot.beta)


def alpha_mask(dot: DotParams, height: int, width: int) -> np.ndarray:
    """Full-frame alpha field of one dot (zero outside the support box)."""
    if height < 1 or width < 1:
        raise ValueError("height and width must be >= 1")
    out = np.zeros((height, width))
    i0, i1, j0, j1 = dot_bbox(dot, height, width)
    if i1 > i0:
        out[i0:i1, j0:j1] = kernels.alpha_block(*_kernel_args(dot), i0, i1, j0, j1)
    return out


def blend_inplace(stack: np.ndarray, dot: DotParams) -> None:
    """Apply one dot to a C-contiguous float64 (N, H, W, 3) stack in place."""
    _, h, w, _ = stack.shape
    i0, i1, j0, j1 = dot_bbox(dot, h, w)
    kernels.blend(stack, *_kernel_args(dot), dot.color, i0, i1, j0, j1)


def apply_dot(x, dot: DotParams) -> np.ndarray:
    x = check_image(x)
    out = np.array(x[None], dtype=np.float64, order="C")
    blend_inplace(out, dot)
    return out[0]


def apply_pattern(x, pattern: StickerPattern | Sequence[DotParams]) -> np.ndarray:
    x = check_image(x)
    return apply_pattern_batch(x[None], pattern)[0]


def apply_pattern_batch(images, pattern) -> np.ndarray:
    """Apply a pattern to an (N, H, W, 3) batch; returns a new array."""
    out = np.array(images, dtype=np.float64, order="C", copy=True)
    if out.ndim != 4 or out.shape[3] != 3:
        raise ValueError(f"batch must have shape (N, H, W, 3), got {out.shape}")
    for dot in pattern:
        blend_inplace(out, dot)
    return out


def pattern_gradient(x, pattern, upstream) -> list[DotGradient]:
    """Gradient of a scalar objective w.r.t. every dot's parameters.

    ``upstream`` is dL/d(apply_pattern(x, pattern)), shape (H, W, 3).
    """
    x = check_image(x)
    g = np.array(upstream, dtype=np.float64, order="C", copy=True)
    if g.shape != x.shape:
        raise ValueError(f"upstream shape {g.shape} does not match image shape {x.shape}")
    if not np.all(np.isfinite(g)):
        bad = int(np.count_nonzero(~np.isfinite(g)))
        raise ValueError(f"upstream gradient has {bad} non-finite entries")
    dots = list(pattern)
    h, w, _ = x.shape
    # intermediates y_0 .. y_{K-1}; y_k is the input to dot k
    stack = np.array(x[None], order="C")
    inputs = []
    for dot in dots:
        inputs.append(stack[0].copy())
        blend_inplace(stack, dot)
    grads = [None] * len(dots)
    for k in range(len(dots) - 1, -1, -1):
        dot = dots[k]
        # box sized for alpha_max = 1 so d_alpha_max stays informative near zero opacity
        box = dot_bbox(replace(dot, alpha_max=1.0), h, w)
        v = kernels.dot_backward(g, inputs[k], *_kernel_args(dot), dot.color, *box)
        grads[k] = DotGradient.from_vector(v)
    return grads


def render_preview(pattern, background=None, height=224, width=224) -> np.ndarray:
    """Pattern composited over ``background`` (white canvas by default)."""
    if background is None:
        background = blank_image(height, width, 1.0)
    return apply_pattern(background, pattern)
