"""Fitting the dot threat model to calibration captures.

Fits run block coordinate ascent on SSIM between the clean capture with a
model dot rendered in, and the real dotted capture. Blocks are visited in the
order center, color, alpha_max, beta, radius; each block takes projected
gradient steps with Armijo backtracking.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .perturb import DEFAULT_MAX_DOTS, DotParams, apply_dot, check_image, pattern_gradient
from .ssim import SSIMReference

log = logging.getLogger(__name__)

# parameter vector layout shared with DotParams.as_vector
REFERENCE_SIDE = 224.0

CENTER = (3, 4)
COLOR = (0, 1, 2)
ALPHA = (6,)
BETA = (7,)
RADIUS = (5,)
BLOCK_ORDER = (("center", CENTER), ("color", COLOR), ("alpha_max", ALPHA), ("beta", BETA), ("radius", RADIUS))
SHAPE_BLOCKS = BLOCK_ORDER[2:]
NUISANCE_BLOCKS = BLOCK_ORDER[:2]

# one "normalized unit" of step per parameter
STEP_SCALE = np.array([0.1, 0.1, 0.1, 1.0, 1.0, 1.0, 0.1, 0.1])
LOWER = np.array([0.0, 0.0, 0.0, -np.inf, -np.inf, 0.5, 0.0, 0.05])
UPPER = np.array([1.0, 1.0, 1.0, np.inf, np.inf, np.inf, 1.0, 20.0])


@dataclass(frozen=True)
class CapturePair:
    clean: np.ndarray
    dotted: np.ndarray
    center_hint: tuple[float, float]
    printed_color: tuple[float, float, float]

    def __post_init__(self):
        clean = check_image(self.clean, "clean capture")
        dotted = check_image(self.dotted, "dotted capture")
        if clean.shape != dotted.shape:
            raise ValueError(f"capture pair sizes differ: {clean.shape} vs {dotted.shape}")
        object.__setattr__(self, "clean", clean)
        object.__setattr__(self, "dotted", dotted)
        object.__setattr__(self, "center_hint", tuple(float(c) for c in self.center_hint))
        object.__setattr__(self, "printed_color", tuple(float(c) for c in self.printed_color))


@dataclass(frozen=True)
class ColorCalibration:
    k: tuple[float, float, float] = (1.0, 1.0, 1.0)
    b: tuple[float, float, float] = (0.0, 0.0, 0.0)
    residual_rms: tuple[float, float, float] = (0.0, 0.0, 0.0)
    n_pairs: int = 0

    def apply(self, printed) -> np.ndarray:
        """Printed RGB -> RGB seen by the camera, clamped to [0, 1]."""
        p = np.asarray(printed, dtype=np.float64)
        return np.clip(np.asarray(self.k) * p + np.asarray(self.b), 0.0, 1.0)

    def invert(self, observed) -> np.ndarray:
        o = np.asarray(observed, dtype=np.float64)
        return np.clip((o - np.asarray(self.b)) / np.asarray(self.k), 0.0, 1.0)

    def to_dict(self):
        return {"k": list(self.k), "b": list(self.b), "residual_rms": list(self.residual_rms), "n_pairs": self.n_pairs}

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(d["k"]), tuple(d["b"]), tuple(d.get("residual_rms", (0.0, 0.0, 0.0))), int(d.get("n_pairs", 0))
        )


@dataclass(frozen=True)
class SharedDotShape:
    radius: float = 40.0
    alpha_max: float = 0.3
    beta: float = 1.0

    def __post_init__(self):
        if not self.radius > 0 or not 0 <= self.alpha_max <= 1 or not self.beta > 0:
            raise ValueError(f"invalid dot shape {self}")

    def dot(self, center, color) -> DotParams:
        return DotParams(tuple(color), tuple(center), self.radius, self.alpha_max, self.beta)

    def scaled(self, factor) -> "SharedDotShape":
        return SharedDotShape(self.radius * factor, self.alpha_max, self.beta)

    def to_dict(self):
        return {"radius": self.radius, "alpha_max": self.alpha_max, "beta": self.beta}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["radius"]), float(d["alpha_max"]), float(d["beta"]))


@dataclass(frozen=True)
class GridSpec:
    """Uniform lattice of candidate dot centers, row-major."""

    rows: int
    cols: int
    spacing: float
    origin: tuple[float, float]

    @classmethod
    def for_image(cls, height, width, cells=45) -> "GridSpec":
        spacing = max(1, min(height, width) // cells)
        oi = (height - (cells - 1) * spacing) / 2
        oj = (width - (cells - 1) * spacing) / 2
        return cls(cells, cells, float(spacing), (float(oi), float(oj)))

    def __len__(self):
        return self.rows * self.cols

    def point(self, index) -> tuple[float, float]:
        r, c = divmod(index, self.cols)
        return (self.origin[0] + r * self.spacing, self.origin[1] + c * self.spacing)

    def points(self) -> list[tuple[float, float]]:
        return [self.point(n) for n in range(len(self))]

    def to_dict(self):
        return {"rows": self.rows, "cols": self.cols, "spacing": self.spacing, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["rows"]), int(d["cols"]), float(d["spacing"]), tuple(d["origin"]))


@dataclass(frozen=True)
class ThreatModel:
    shape: SharedDotShape
    palette: tuple[tuple[float, float, float], ...]
    grid: GridSpec
    max_dots: int = DEFAULT_MAX_DOTS
    palette_printed: tuple[tuple[float, float, float], ...] | None = None
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        palette = tuple(tuple(float(c) for c in col) for col in self.palette)
        if not palette:
            raise ValueError("palette must hold at least one color")
        if any(not 0.0 <= c <= 1.0 for col in palette for c in col):
            raise ValueError("palette colors must lie in [0, 1]")
        object.__setattr__(self, "palette", palette)
        if self.palette_printed is not None:
            pp = tuple(tuple(float(c) for c in col) for col in self.palette_printed)
            if len(pp) != len(palette):
                raise ValueError("palette_printed must match palette length")
            object.__setattr__(self, "palette_printed", pp)

    def dot(self, grid_index, palette_index) -> DotParams:
        return self.shape.dot(self.grid.point(grid_index), self.palette[palette_index])

    def printed_color(self, observed):
        """Printer-space color of a palette entry, or the observed color if unknown."""
        observed = tuple(float(c) for c in observed)
        if self.palette_printed is not None:
            for obs, pr in zip(self.palette, self.palette_printed):
                if np.allclose(obs, observed, atol=1e-12):
                    return pr
        return observed

    def to_dict(self):
        return {
            "shape": self.shape.to_dict(),
            "palette": [list(c) for c in self.palette],
            "palette_printed": None if self.palette_printed is None else [list(c) for c in self.palette_printed],
            "grid": self.grid.to_dict(),
            "max_dots": self.max_dots,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d):
        pp = d.get("palette_printed")
        return cls(
            SharedDotShape.from_dict(d["shape"]),
            tuple(tuple(c) for c in d["palette"]),
            GridSpec.from_dict(d["grid"]),
            int(d.get("max_dots", DEFAULT_MAX_DOTS)),
            None if pp is None else tuple(tuple(c) for c in pp),
            dict(d.get("diagnostics", {})),
        )


# --------------------------------------------------------------------------
# color transform


def fit_color_transform(pairs) -> ColorCalibration:
    """Per-channel least squares of observed = k * printed + b.

    ``pairs`` is a sequence of (printed RGB, observed RGB).
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError("color calibration needs at least 2 (printed, observed) pairs")
    P = np.array([p for p, _ in pairs], dtype=np.float64)
    O = np.array([o for _, o in pairs], dtype=np.float64)
    if P.shape[1:] != (3,) or O.shape[1:] != (3,):
        raise ValueError("color pairs must be RGB triples")
    k, b, rms = [], [], []
    for c, name in enumerate("RGB"):
        x, y = P[:, c], O[:, c]
        if np.ptp(x) == 0.0:
            raise ValueError(f"printed {name} channel is constant; cannot fit its scale")
        A = np.column_stack([x, np.ones_like(x)])
        (kc, bc), *_ = np.linalg.lstsq(A, y, rcond=None)
        k.append(float(kc))
        b.append(float(bc))
        rms.append(float(np.sqrt(np.mean((A @ [kc, bc] - y) ** 2))))
    return ColorCalibration(tuple(k), tuple(b), tuple(rms), len(pairs))


# --------------------------------------------------------------------------
# block coordinate ascent


def _project(theta):
    return np.clip(theta, LOWER, UPPER)


def _block_ascent(obj, theta, idx, max_steps, c_armijo=1e-4, min_step=1e-7):
    """Projected gradient ascent on the coordinates ``idx`` of ``theta``.

    ``obj.value(theta)`` evaluates the objective; ``obj.grad(theta)`` its full
    gradient. Returns (theta, value, n_accepted). Accepted steps satisfy the
    Armijo condition, so the value never drops.
    """
    idx = list(idx)
    f0 = obj.value(theta)
    g = obj.grad(theta)
    accepted = 0
    t = 1.0
    for _ in range(max_steps):
        gs = g[idx] * STEP_SCALE[idx]
        norm = np.linalg.norm(gs)
        if norm == 0.0 or not np.isfinite(norm):
            break
        d = np.zeros_like(theta)
        d[idx] = STEP_SCALE[idx] * gs / norm
        while t >= min_step:
            cand = _project(theta + t * d)
            delta = cand - theta
            if np.any(delta):
                f1 = obj.value(cand)
                if f1 >= f0 + c_armijo * float(g @ delta):
                    break
            t *= 0.5
        else:
            break
        improvement = f1 - f0
        theta, f0 = cand, f1
        g = obj.grad(theta)
        accepted += 1
        t = min(1.0, 2.0 * t)
        if improvement <= 1e-13:
            break
    return theta, f0, accepted


class _PairObjective:
    """SSIM(apply_dot(clean, theta), dotted) and its gradient in theta."""

    def __init__(self, pair: CapturePair):
        self.clean = pair.clean
        self.ref = SSIMReference(pair.dotted)
        self._key = None
        self._cache = None

    def _forward(self, theta):
        key = theta.tobytes()
        if key != self._key:
            dot = DotParams.from_vector(theta)
            out = apply_dot(self.clean, dot)
            terms = self.ref._terms(out)
            A1, A2, B1, B2 = terms[1:]
            self._key = key
            self._cache = (dot, out, terms, float(np.mean((A1 * A2) / (B1 * B2))))
        return self._cache

    def value(self, theta):
        return self._forward(theta)[3]

    def grad(self, theta):
        dot, out, terms, _ = self._forward(theta)
        _, gpix = self.ref.value_and_grad(out, terms)
        return pattern_gradient(self.clean, [dot], gpix)[0].as_vector()


class _MeanObjective:
    """Mean pair SSIM as a function of the shared shape, nuisances held fixed."""

    def __init__(self, objectives, thetas):
        self.objectives = objectives
        self.thetas = thetas

    def _full(self, k, shape_vec):
        th = self.thetas[k].copy()
        th[5:8] = shape_vec[5:8]
        return th

    def value(self, shape_vec):
        return float(np.mean([o.value(self._full(k, shape_vec)) for k, o in enumerate(self.objectives)]))

    def grad(self, shape_vec):
        return np.mean([o.grad(self._full(k, shape_vec)) for k, o in enumerate(self.objectives)], axis=0)


@dataclass
class SingleDotFit:
    dot: DotParams
    ssim: float
    initial_ssim: float
    sweeps: int
    warning: str | None = None

    def __iter__(self):
        # allows ``dot, score = fit_single_dot(...)``
        return iter((self.dot, self.ssim))


def default_shape(height, width) -> SharedDotShape:
    """Default shape with its radius scaled from a 224-px frame to this capture size."""
    return SharedDotShape().scaled(min(height, width) / REFERENCE_SIDE)


def initial_dot(pair: CapturePair, shape: SharedDotShape, calibration: ColorCalibration) -> DotParams:
    color = calibration.apply(pair.printed_color)
    return DotParams(tuple(color), pair.center_hint, shape.radius, shape.alpha_max, shape.beta)


def fit_single_dot(
    pair: CapturePair,
    shape_init: SharedDotShape | None = None,
    calibration: ColorCalibration | None = None,
    inner_steps=50,
    max_sweeps=20,
    tol=1e-5,
) -> SingleDotFit:
    shape_init = shape_init or default_shape(*pair.clean.shape[:2])
    calibration = calibration or ColorCalibration()
    shape, centers, colors, diag = _alternate(
        [pair], shape_init, calibration, inner_steps, max_sweeps, tol, threads=1
    )
    dot = DotParams(tuple(colors[0]), tuple(centers[0]), shape.radius, shape.alpha_max, shape.beta)
    s0, s1 = diag["initial_ssim"][0], diag["ssim"][0]
    warning = None
    if not s1 > s0:
        warning = f"SSIM did not improve over initialization ({s0:.6f} -> {s1:.6f})"
        log.warning(warning)
    return SingleDotFit(dot, s1, s0, diag["sweeps"], warning)


@dataclass
class SharedShapeFit:
    shape: SharedDotShape
    centers: list[tuple[float, float]]
    colors: list[tuple[float, float, float]]
    ssim: list[float]
    mean_ssim: float
    sweeps: int

    def __iter__(self):
        return iter((self.shape, list(zip(self.centers, self.colors))))


def fit_shared_shape(
    pairs: Sequence[CapturePair],
    calibration: ColorCalibration | None = None,
    shape_init: SharedDotShape | None = None,
    inner_steps=50,
    max_sweeps=20,
    tol=1e-5,
    threads=1,
) -> SharedShapeFit:
    """Learn one (radius, alpha_max, beta) across many captures.

    Each sweep fits every pair's center and color with the shape frozen, then
    ascends the mean SSIM over the shape blocks.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("fit_shared_shape needs at least one capture pair")
    shape_init = shape_init or default_shape(*pairs[0].clean.shape[:2])
    calibration = calibration or ColorCalibration()
    shape, centers, colors, diag = _alternate(pairs, shape_init, calibration, inner_steps, max_sweeps, tol, threads)
    return SharedShapeFit(
        shape,
        [tuple(c) for c in centers],
        [tuple(c) for c in colors],
        list(diag["ssim"]),
        float(np.mean(diag["ssim"])),
        diag["sweeps"],
    )


def _alternate(pairs, shape_init, calibration, inner_steps, max_sweeps, tol, threads):
    objectives = [_PairObjective(p) for p in pairs]
    thetas = [initial_dot(p, shape_init, calibration).as_vector() for p in pairs]
    n = len(pairs)

    def fit_nuisance(k):
        th = thetas[k]
        for _, idx in NUISANCE_BLOCKS:
            th, _, _ = _block_ascent(objectives[k], th, idx, inner_steps)
        return th

    initial = [obj.value(th) for obj, th in zip(objectives, thetas)]
    prev = float(np.mean(initial))
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        if threads > 1 and n > 1:
            with ThreadPoolExecutor(threads) as pool:
                thetas = list(pool.map(fit_nuisance, range(n)))
        else:
            thetas = [fit_nuisance(k) for k in range(n)]
        shape_vec = thetas[0].copy()
        mean_obj = _MeanObjective(objectives, thetas)
        for _, idx in SHAPE_BLOCKS:
            shape_vec, cur, _ = _block_ascent(mean_obj, shape_vec, idx, inner_steps)
        for th in thetas:
            th[5:8] = shape_vec[5:8]
        log.debug("shape fit sweep %d: mean SSIM %.10f", sweeps, cur)
        if _converged(prev, cur, tol):
            prev = cur
            break
        prev = cur
    final = [obj.value(th) for obj, th in zip(objectives, thetas)]
    shape = SharedDotShape(float(thetas[0][5]), float(thetas[0][6]), float(thetas[0][7]))
    centers = [th[3:5].copy() for th in thetas]
    colors = [th[0:3].copy() for th in thetas]
    return shape, centers, colors, {"initial_ssim": initial, "ssim": final, "sweeps": sweeps}


def _converged(prev, cur, tol):
    return cur - prev < tol


# --------------------------------------------------------------------------
# palette selection


def candidate_lattice(levels=5, calibration: ColorCalibration | None = None):
    """(printed, observed) colors on a uniform RGB lattice, observed via calibration."""
    calibration = calibration or ColorCalibration()
    ticks = np.linspace(0.0, 1.0, levels)
    printed = [(r, g, b) for r in ticks for g in ticks for b in ticks]
    observed = [tuple(float(v) for v in calibration.apply(p)) for p in printed]
    return [tuple(float(v) for v in p) for p in printed], observed


def score_colors(candidates, classifier, images, shape: SharedDotShape, grid: GridSpec, trials_per_color=20, seed=0):
    """Fraction of random single-dot placements that change the clean prediction, per color.

    Trial t uses the same (image, grid cell) draw for every color.
    """
    if trials_per_color < 1:
        raise ValueError("trials_per_color must be >= 1")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("palette scoring needs a non-empty (N, H, W, 3) image set")
    draws = []
    for t in range(trials_per_color):
        rng = np.random.default_rng([seed, t])
        draws.append((int(rng.integers(len(images))), int(rng.integers(len(grid)))))
    used = sorted({i for i, _ in draws})
    clean = dict(zip(used, np.argmax(classifier.forward(images[used]), axis=1)))
    scores = []
    for color in candidates:
        batch = np.empty((trials_per_color,) + images.shape[1:])
        for t, (i, g) in enumerate(draws):
            batch[t] = apply_dot(images[i], shape.dot(grid.point(g), color))
        pred = np.argmax(classifier.forward(batch), axis=1)
        flips = sum(int(p != clean[i]) for p, (i, _) in zip(pred, draws))
        scores.append(flips / trials_per_color)
    return scores


def select_palette(
    candidates, classifier, images, shape: SharedDotShape, grid: GridSpec, trials_per_color=20, palette_size=10, seed=0
):
    """Top ``palette_size`` candidates by single-dot fooling rate; ties keep candidate order."""
    candidates = [tuple(float(c) for c in col) for col in candidates]
    if not 1 <= palette_size <= len(candidates):
        raise ValueError(f"palette_size must be in [1, {len(candidates)}], got {palette_size}")
    scores = score_colors(candidates, classifier, images, shape, grid, trials_per_color, seed)
    order = sorted(range(len(candidates)), key=lambda k: (-scores[k], k))[:palette_size]
    return [candidates[k] for k in order], [scores[k] for k in order], order
