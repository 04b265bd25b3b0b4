"""Print-ready sticker bitmaps.

Each dot prints as a solid opaque disk; the translucent look in camera space
comes from the lens being out of focus, so no transparency goes into the file.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

# 40 px camera-space radius corresponds to a 0.025 in printed radius
DEFAULT_SCALE = 0.025 / 40.0
DEFAULT_DPI = 1200
DEFAULT_MIN_RADIUS_IN = 0.01


class SmallDotWarning(UserWarning):
    pass


@dataclass(frozen=True)
class StickerExportSpec:
    """Print geometry for one sticker.

    ``scale`` is inches of printed radius per camera pixel of radius. When
    ``canvas`` (width, height in inches) is None it is the camera frame times
    ``scale``, so placement and radius share one scale.
    """

    dpi: float = DEFAULT_DPI
    scale: float = DEFAULT_SCALE
    canvas: tuple[float, float] | None = None
    mirror: bool = False
    min_radius_in: float = DEFAULT_MIN_RADIUS_IN

    def __post_init__(self):
        if not self.dpi > 0:
            raise ValueError(f"dpi must be > 0, got {self.dpi}")
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if self.canvas is not None and not (self.canvas[0] > 0 and self.canvas[1] > 0):
            raise ValueError(f"canvas dimensions must be > 0, got {self.canvas}")

    def canvas_inches(self, frame_hw) -> tuple[float, float]:
        if self.canvas is not None:
            return float(self.canvas[0]), float(self.canvas[1])
        h, w = frame_hw
        return w * self.scale, h * self.scale

    def to_dict(self):
        return {
            "dpi": self.dpi,
            "scale": self.scale,
            "canvas": None if self.canvas is None else list(self.canvas),
            "mirror": self.mirror,
            "min_radius_in": self.min_radius_in,
        }


@dataclass(frozen=True)
class PlacedDot:
    x_in: float
    y_in: float
    radius_in: float
    radius_dots: float
    color: tuple[float, float, float]

    def to_dict(self):
        return {
            "x_in": self.x_in,
            "y_in": self.y_in,
            "radius_in": self.radius_in,
            "radius_dots": self.radius_dots,
            "color": list(self.color),
        }


def layout_dots(pattern, frame_hw, spec: StickerExportSpec, color_map=None) -> list[PlacedDot]:
    """Map camera-space dots onto the print canvas (x right, y down, inches).

    ``color_map`` turns an observed color into the color to print.
    """
    h, w = frame_hw
    cw, ch = spec.canvas_inches(frame_hw)
    placed = []
    for k, dot in enumerate(pattern):
        ci, cj = dot.center
        # pixel centers sit at index + 0.5 in a frame spanning [0, w] x [0, h]
        x = (cj + 0.5) / w * cw
        y = (ci + 0.5) / h * ch
        if spec.mirror:
            x = cw - x
        r_in = dot.radius * spec.scale
        if r_in < spec.min_radius_in:
            msg = (
                f"dot {k} prints at radius {r_in:.4f} in, below the {spec.min_radius_in:.4f} in minimum; "
                "an undersized print tends to image as a fainter dot of similar size, not a smaller one"
            )
            warnings.warn(msg, SmallDotWarning, stacklevel=2)
        color = tuple(float(c) for c in (color_map(dot.color) if color_map else dot.color))
        placed.append(PlacedDot(float(x), float(y), float(r_in), float(r_in * spec.dpi), color))
    return placed


def render_sticker(placed, frame_hw, spec: StickerExportSpec) -> np.ndarray:
    """White canvas with opaque disks; device pixel (row, col) is centered at (row + 0.5) / dpi."""
    cw, ch = spec.canvas_inches(frame_hw)
    width = max(1, int(round(cw * spec.dpi)))
    height = max(1, int(round(ch * spec.dpi)))
    canvas = np.ones((height, width, 3))
    for d in placed:
        cx, cy, r = d.x_in * spec.dpi, d.y_in * spec.dpi, d.radius_dots
        r0, r1 = max(0, int(np.floor(cy - r))), min(height, int(np.ceil(cy + r)) + 1)
        c0, c1 = max(0, int(np.floor(cx - r))), min(width, int(np.ceil(cx + r)) + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        yy = np.arange(r0, r1)[:, None] + 0.5 - cy
        xx = np.arange(c0, c1)[None, :] + 0.5 - cx
        inside = yy**2 + xx**2 <= r * r
        canvas[r0:r1, c0:c1][inside] = d.color
    return canvas
