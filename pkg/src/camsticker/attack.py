"""Targeted universal sticker attacks.

The objective for a batch of victim-class images is::

    L = sum_l [ ce(f(pi(x_l)), y_star) - ce(f(pi(x_l)), y_targ) ]

and is maximized. ``greedy_coordinate_descent`` assigns each dot the best
(grid cell, palette color) with all other dots frozen, sweeping until the loss
settles; ``fine_tune_positions`` then moves the dot centers off the grid by
gradient ascent. ``pgd_unconstrained`` ignores the fitted threat model and
ascends all dot parameters inside a box.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .calib import ThreatModel
from .classifiers import ClassifierBackend, GradientUnavailable, SerializedBackend, targeted_loss_terms
from .perturb import DotParams, StickerPattern, apply_pattern_batch, blend_inplace, pattern_gradient

log = logging.getLogger(__name__)

INVISIBLE = None


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    victim: int
    target: int
    num_dots: int
    threat_model: ThreatModel
    max_sweeps: int = 5
    tol: float = 1e-4
    subsample: int | None = None
    seed: int = 0
    threads: int = 1
    allow_invisible: bool = True
    fine_tune_steps: int = 200
    finite_difference: bool = False
    fd_step: float = 1e-2
    candidate_batch: int = 256

    def __post_init__(self):
        if self.victim == self.target:
            raise ValueError("victim and target class must differ")
        if not 0 <= self.num_dots <= self.threat_model.max_dots:
            raise ValueError(f"num_dots must be in [0, {self.threat_model.max_dots}], got {self.num_dots}")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")

    def with_dots(self, k) -> "AttackConfig":
        return replace(self, num_dots=k)

    def to_dict(self):
        return {
            "victim": self.victim,
            "target": self.target,
            "num_dots": self.num_dots,
            "max_sweeps": self.max_sweeps,
            "tol": self.tol,
            "subsample": self.subsample,
            "seed": self.seed,
            "allow_invisible": self.allow_invisible,
            "fine_tune_steps": self.fine_tune_steps,
            "finite_difference": self.finite_difference,
            "fd_step": self.fd_step,
        }


@dataclass
class StageSummary:
    stage: str
    loss: float
    fraction_correct: float
    fraction_target: float
    fraction_other: float

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class AttackResult:
    pattern: StickerPattern
    loss_trace: list[tuple[int, float]]
    assignments: list[tuple[int, int] | None] = field(default_factory=list)
    fine_tune_trace: list[float] = field(default_factory=list)
    stages: list[StageSummary] = field(default_factory=list)
    subsample_indices: list[int] | None = None
    # with subsampling, loss_trace entries from this index on are sums over the full set
    full_set_from: int | None = None

    @property
    def final_loss(self) -> float:
        if self.fine_tune_trace:
            return self.fine_tune_trace[-1]
        return self.loss_trace[-1][1]

    def to_dict(self):
        return {
            "pattern": self.pattern.to_dict(),
            "loss_trace": [[s, l] for s, l in self.loss_trace],
            "assignments": [None if a is None else list(a) for a in self.assignments],
            "fine_tune_trace": list(self.fine_tune_trace),
            "stages": [s.to_dict() for s in self.stages],
            "subsample_indices": self.subsample_indices,
            "full_set_from": self.full_set_from,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            StickerPattern.from_dict(d["pattern"]),
            [(int(s), float(l)) for s, l in d["loss_trace"]],
            [None if a is None else (int(a[0]), int(a[1])) for a in d.get("assignments", [])],
            [float(v) for v in d.get("fine_tune_trace", [])],
            [StageSummary(**s) for s in d.get("stages", [])],
            d.get("subsample_indices"),
            d.get("full_set_from"),
        )


def _batched_terms(images, y_star, y_targ, classifier, offset=0):
    """Per-image loss terms; wraps classifier failures with the batch position."""
    out = []
    step = max(1, classifier.max_batch)
    for s in range(0, len(images), step):
        try:
            logits = classifier.forward(images[s : s + step])
        except Exception as exc:
            raise AttackError(f"classifier failed on batch starting at image {offset + s}: {exc}") from exc
        out.append(targeted_loss_terms(logits, y_star, y_targ))
    return np.concatenate(out) if out else np.zeros(0)


def targeted_universal_loss(pattern, images, y_star, y_targ, classifier: ClassifierBackend) -> float:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("targeted_universal_loss needs a non-empty (N, H, W, 3) batch")
    for y in (y_star, y_targ):
        if not 0 <= y < classifier.num_classes:
            raise ValueError(f"class index {y} invalid for a {classifier.num_classes}-class model")
    perturbed = apply_pattern_batch(images, pattern)
    return float(np.sum(_batched_terms(perturbed, y_star, y_targ, classifier)))


# --------------------------------------------------------------------------
# greedy coordinate search


def _visible(dots):
    return [d for d in dots if d is not None]


class _CandidateEvaluator:
    """Scores every (grid cell, palette color) choice for one dot slot.

    The composite of the dots before the slot is computed once per slot; each
    candidate reapplies only itself and the dots after it.
    """

    def __init__(self, tm: ThreatModel, classifier, y_star, y_targ, batch, threads, allow_invisible):
        self.tm = tm
        self.classifier = classifier
        self.y_star, self.y_targ = y_star, y_targ
        self.batch = batch
        self.threads = threads
        self.n_grid = len(tm.grid)
        self.n_pal = len(tm.palette)
        self.n_cand = self.n_grid * self.n_pal + (1 if allow_invisible else 0)

    def candidate(self, c) -> DotParams | None:
        if c == self.n_grid * self.n_pal:
            return INVISIBLE
        g, p = divmod(c, self.n_pal)
        return self.tm.dot(g, p)

    def assignment(self, c):
        if c == self.n_grid * self.n_pal:
            return None
        return divmod(c, self.n_pal)

    def scores(self, prefix, suffix):
        m = len(prefix)
        per = max(1, self.batch // m)
        chunks = [range(s, min(s + per, self.n_cand)) for s in range(0, self.n_cand, per)]

        def run(chunk):
            stack = np.empty((len(chunk) * m,) + prefix.shape[1:])
            for n, c in enumerate(chunk):
                view = stack[n * m : (n + 1) * m]
                view[...] = prefix
                dot = self.candidate(c)
                if dot is not None:
                    blend_inplace(view, dot)
            for dot in suffix:
                blend_inplace(stack, dot)
            terms = _batched_terms(stack, self.y_star, self.y_targ, self.classifier)
            return terms.reshape(len(chunk), m).sum(axis=1)

        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(ch) for ch in chunks]
        # reduction by candidate index, independent of completion order
        return np.concatenate(parts)


def greedy_coordinate_descent(config: AttackConfig, classifier: ClassifierBackend, images) -> AttackResult:
    """Greedy block search over grid x palette, one dot at a time.

    Dots start invisible. Ties go to the lowest grid index, then the lowest
    palette index; the invisible choice ranks after every visible one.
    """
    images = np.ascontiguousarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("attack needs a non-empty (N, H, W, 3) image batch")
    tm = config.threat_model
    if config.threads > 1 and not getattr(classifier, "concurrency_safe", False):
        classifier = SerializedBackend(classifier)
    ev = _CandidateEvaluator(
        tm, classifier, config.victim, config.target, config.candidate_batch, config.threads, config.allow_invisible
    )

    sub_idx = None
    work = images
    if config.subsample is not None and config.subsample < len(images):
        rng = np.random.default_rng(config.seed)
        sub_idx = sorted(rng.choice(len(images), config.subsample, replace=False).tolist())
        work = images[sub_idx]

    K = config.num_dots
    dots: list[DotParams | None] = [INVISIBLE] * K
    assign: list[tuple[int, int] | None] = [None] * K
    prev = targeted_universal_loss(StickerPattern((), tm.max_dots), work, config.victim, config.target, classifier)
    trace = [(0, prev)]
    if K == 0:
        return AttackResult(StickerPattern((), tm.max_dots), trace, [], subsample_indices=sub_idx)

    sweep = 0
    final_pass = False
    full_from = None
    while True:
        sweep += 1
        if sub_idx is not None and not final_pass and sweep == config.max_sweeps:
            final_pass = True
        if final_pass and full_from is None:
            # switch to the full set; rescore the current pattern so the trace stays monotone per set
            work = images
            prev = targeted_universal_loss(_visible(dots), work, config.victim, config.target, classifier)
            full_from = len(trace)
            trace.append((sweep - 1, prev))
        for k in range(K):
            prefix = apply_pattern_batch(work, _visible(dots[:k]))
            suffix = _visible(dots[k + 1 :])
            scores = ev.scores(prefix, suffix)
            best = int(np.argmax(scores))
            dots[k] = ev.candidate(best)
            assign[k] = ev.assignment(best)
            log.debug("sweep %d dot %d -> %s (loss %.6f)", sweep, k, assign[k], scores[best])
        cur = float(scores[best])
        trace.append((sweep, cur))
        rel = (cur - prev) / max(abs(prev), 1e-12)
        prev = cur
        if sub_idx is None or final_pass:
            if rel < config.tol or sweep >= config.max_sweeps:
                break
        elif rel < config.tol:
            final_pass = True
    pattern = StickerPattern(tuple(_visible(dots)), tm.max_dots)
    return AttackResult(pattern, trace, assign, subsample_indices=sub_idx, full_set_from=full_from)


# --------------------------------------------------------------------------
# gradients of the attack loss


def loss_and_param_grads(pattern, images, y_star, y_targ, classifier):
    """Attack loss and its gradient w.r.t. every dot parameter, shape (K, 8)."""
    dots = list(pattern)
    perturbed = apply_pattern_batch(images, dots)
    try:
        gpix, terms = classifier.input_gradient(perturbed, y_star, y_targ)
    except GradientUnavailable:
        raise
    except Exception as exc:
        raise AttackError(f"classifier gradient failed: {exc}") from exc
    total = np.zeros((len(dots), 8))
    for x, g in zip(images, gpix):
        for k, dg in enumerate(pattern_gradient(x, dots, g)):
            total[k] += dg.as_vector()
    return float(np.sum(terms)), total


def _fd_param_grads(pattern, images, y_star, y_targ, classifier, coords, step):
    """Central differences of the loss over selected (dot, parameter) coordinates."""
    dots = list(pattern)
    grad = np.zeros((len(dots), 8))
    for k, j in coords:
        vals = []
        for sgn in (1.0, -1.0):
            v = dots[k].as_vector()
            v[j] += sgn * step
            trial = list(dots)
            trial[k] = _unchecked_dot(v)
            vals.append(targeted_universal_loss(trial, images, y_star, y_targ, classifier))
        grad[k, j] = (vals[0] - vals[1]) / (2 * step)
    return grad


def _unchecked_dot(v):
    v = np.asarray(v, dtype=np.float64).copy()
    v[0:3] = np.clip(v[0:3], 0.0, 1.0)
    v[6] = np.clip(v[6], 0.0, 1.0)
    v[5] = max(v[5], 1e-9)
    v[7] = max(v[7], 1e-9)
    return DotParams.from_vector(v)


def _gradient_mode(config_fd, classifier):
    if classifier.supports_input_gradient:
        return "analytic"
    if config_fd:
        return "finite-difference"
    raise GradientUnavailable(
        f"{type(classifier).__name__} has no input gradients and finite-difference mode is disabled; "
        "pass finite_difference=True (CLI: --finite-difference)"
    )


# --------------------------------------------------------------------------
# position fine-tuning


def fine_tune_positions(
    result: AttackResult, config: AttackConfig, classifier: ClassifierBackend, images, finite_difference=None
) -> AttackResult:
    """Gradient ascent on the dot centers only; colors and shape stay fixed.

    Each step moves every center along the loss gradient, scaled so the largest
    move is ``t`` pixels, with Armijo backtracking from t = 1. Centers stay
    within the image extended by one radius.
    """
    images = np.ascontiguousarray(images, dtype=np.float64)
    fd = config.finite_difference if finite_difference is None else finite_difference
    mode = _gradient_mode(fd, classifier)
    dots = list(result.pattern)
    y_star, y_targ = config.victim, config.target
    if not dots:
        return replace(result, fine_tune_trace=[result.loss_trace[-1][1]])
    h, w = images.shape[1:3]

    def centers_of(ds):
        return np.array([d.center for d in ds])

    def with_centers(cs):
        out = []
        for d, (ci, cj) in zip(dots, cs):
            r = d.radius
            out.append(d.with_center(np.clip(ci, -r, h - 1 + r), np.clip(cj, -r, w - 1 + r)))
        return out

    def loss_grad(ds):
        if mode == "analytic":
            f, g = loss_and_param_grads(ds, images, y_star, y_targ, classifier)
        else:
            f = targeted_universal_loss(ds, images, y_star, y_targ, classifier)
            coords = [(k, j) for k in range(len(ds)) for j in (3, 4)]
            g = _fd_param_grads(ds, images, y_star, y_targ, classifier, coords, config.fd_step)
        return f, g[:, 3:5]

    f0, g = loss_grad(dots)
    trace = [f0]
    c_armijo = 1e-4
    for _ in range(config.fine_tune_steps):
        scale = np.max(np.abs(g))
        if scale == 0.0 or not np.isfinite(scale):
            break
        direction = g / scale
        t = 1.0
        accepted = False
        while t >= 1e-3:
            trial = with_centers(centers_of(dots) + t * direction)
            delta = centers_of(trial) - centers_of(dots)
            if np.any(delta):
                f1 = targeted_universal_loss(trial, images, y_star, y_targ, classifier)
                if f1 >= f0 + c_armijo * float(np.sum(g * delta)):
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        rel = (f1 - f0) / max(abs(f0), 1e-12)
        dots = trial
        f0 = f1
        trace.append(f0)
        if rel < config.tol:
            break
        _, g = loss_grad(dots)
    pattern = StickerPattern(tuple(dots), result.pattern.max_dots)
    return replace(result, pattern=pattern, fine_tune_trace=trace)


# --------------------------------------------------------------------------
# unconstrained baseline


@dataclass(frozen=True)
class PGDBounds:
    """Box for every dot parameter, in DotParams vector order."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    @classmethod
    def for_image(cls, height, width, radius=(1.0, 60.0), beta=(0.1, 10.0)):
        # center range [0, side]; radius range given in pixels of a 224-px frame, scaled
        s = min(height, width) / 224.0
        return cls(
            (0.0, 0.0, 0.0, 0.0, 0.0, radius[0], 0.0, beta[0]),
            (1.0, 1.0, 1.0, float(height), float(width), radius[1] * s, 1.0, beta[1]),
        )

    def project(self, theta):
        """Clamp a (K, 8) parameter array into the box."""
        return np.clip(theta, np.asarray(self.lower), np.asarray(self.upper))


PGD_STEP_SCALE = np.array([0.1, 0.1, 0.1, 2.0, 2.0, 2.0, 0.1, 0.1])


def _pgd_init(K, bounds: PGDBounds, seed):
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(bounds.lower), np.asarray(bounds.upper)
    theta = lo + (hi - lo) * rng.random((K, 8))
    theta[:, 6] = lo[6] + 0.5 * (hi[6] - lo[6])
    theta[:, 7] = np.clip(1.0, lo[7], hi[7])
    return bounds.project(theta)


def pgd_unconstrained(
    images,
    y_star,
    y_targ,
    num_dots,
    bounds: PGDBounds,
    classifier: ClassifierBackend,
    steps=100,
    init: StickerPattern | None = None,
    seed=0,
    finite_difference=False,
    fd_step=1e-3,
    callback=None,
) -> StickerPattern:
    """Projected gradient ascent on all parameters of ``num_dots`` dots jointly.

    Steps use a per-parameter scale (``PGD_STEP_SCALE``) normalized so the largest
    scaled move is ``t``, with Armijo backtracking; every iterate is projected
    onto ``bounds`` and ``callback(theta)`` sees each accepted iterate.
    """
    images = np.ascontiguousarray(images, dtype=np.float64)
    mode = _gradient_mode(finite_difference, classifier)
    if init is not None:
        if len(init) != num_dots:
            raise ValueError("init pattern must have num_dots dots")
        theta = np.array([d.as_vector() for d in init]).reshape(num_dots, 8)
    else:
        theta = _pgd_init(num_dots, bounds, seed)
    theta = bounds.project(theta)
    if callback is not None:
        callback(theta)

    def to_dots(th):
        return [_unchecked_dot(v) for v in th]

    def loss_grad(th):
        ds = to_dots(th)
        if mode == "analytic":
            return loss_and_param_grads(ds, images, y_star, y_targ, classifier)
        f = targeted_universal_loss(ds, images, y_star, y_targ, classifier)
        coords = [(k, j) for k in range(len(ds)) for j in range(8)]
        return f, _fd_param_grads(ds, images, y_star, y_targ, classifier, coords, fd_step)

    if num_dots == 0:
        return StickerPattern((), max(10, num_dots))
    f0, g = loss_grad(theta)
    t = 1.0
    for _ in range(steps):
        gs = g * PGD_STEP_SCALE
        scale = np.max(np.abs(gs))
        if scale == 0.0 or not np.isfinite(scale):
            break
        direction = PGD_STEP_SCALE * gs / scale
        accepted = False
        while t >= 1e-4:
            trial = bounds.project(theta + t * direction)
            delta = trial - theta
            if np.any(delta):
                f1 = targeted_universal_loss(to_dots(trial), images, y_star, y_targ, classifier)
                if f1 >= f0 + 1e-4 * float(np.sum(g * delta)):
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        theta, f0 = trial, f1
        if callback is not None:
            callback(theta)
        t = min(1.0, 2 * t)
        _, g = loss_grad(theta)
    return StickerPattern(tuple(to_dots(theta)), max(10, num_dots))


# --------------------------------------------------------------------------
# orchestration


def stage_summary(stage, pattern, images, config, classifier) -> StageSummary:
    perturbed = apply_pattern_batch(images, pattern)
    logits = np.concatenate(
        [classifier.forward(perturbed[s : s + 256]) for s in range(0, len(perturbed), 256)], axis=0
    )
    pred = np.argmax(logits, axis=1)
    loss = float(np.sum(targeted_loss_terms(logits, config.victim, config.target)))
    n = len(pred)
    c = float(np.mean(pred == config.victim))
    t = float(np.mean(pred == config.target))
    return StageSummary(stage, loss, c, t, 1.0 - c - t if n else 0.0)


def run_attack(config: AttackConfig, classifier, images, fine_tune=True) -> AttackResult:
    """Greedy search followed (optionally) by position fine-tuning."""
    images = np.ascontiguousarray(images, dtype=np.float64)
    result = greedy_coordinate_descent(config, classifier, images)
    stages = [stage_summary("greedy", result.pattern, images, config, classifier)]
    if fine_tune and len(result.pattern):
        result = fine_tune_positions(result, config, classifier, images)
        stages.append(stage_summary("fine-tune", result.pattern, images, config, classifier))
    result.stages = stages
    return result
