import itertools

import numpy as np
import pytest

from camsticker.attack import (
    PGD_STEP_SCALE,
    AttackConfig,
    AttackError,
    AttackResult,
    PGDBounds,
    _fd_param_grads,
    fine_tune_positions,
    greedy_coordinate_descent,
    loss_and_param_grads,
    pgd_unconstrained,
    run_attack,
    targeted_universal_loss,
)
from camsticker.calib import GridSpec, SharedDotShape, ThreatModel
from camsticker.classifiers import (
    ClassifierBackend,
    ConstantClassifier,
    GradientUnavailable,
    LinearClassifier,
    builtin_toy_network,
    targeted_loss_terms,
)
from camsticker.perturb import DotParams
from oracles import dense_apply_pattern, rel_err

SIZE = 12
PALETTE = ((1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (1.0, 1.0, 1.0))


def linear_model(seed=0):
    rng = np.random.default_rng(seed)
    return LinearClassifier(rng.normal(size=(3, SIZE * SIZE * 3)) * 0.1, rng.normal(size=3), (SIZE, SIZE))


def threat_model(cells=9, palette=PALETTE, radius=2.5):
    return ThreatModel(SharedDotShape(radius, 0.6, 1.0), palette, GridSpec(cells, cells, 1.0, (1.5, 1.5)))


def images(n=4, seed=1, size=SIZE):
    return np.random.default_rng(seed).random((n, size, size, 3))


def conv_model(seed=0):
    return builtin_toy_network(seed, "conv2", (24, 24), 3, channels=(4, 4))


def dense_loss(dots, xs, clf, y_star=0, y_targ=2):
    vecs = [d.as_vector() for d in dots]
    perturbed = np.stack([dense_apply_pattern(x, vecs) for x in xs])
    return float(np.sum(targeted_loss_terms(clf.forward(perturbed), y_star, y_targ)))


class FailingClassifier(ClassifierBackend):
    num_classes = 3
    max_batch = 2

    def __init__(self, fail_at):
        self.calls = 0
        self.fail_at = fail_at

    def _forward(self, x):
        self.calls += 1
        if self.calls == self.fail_at:
            raise RuntimeError("device lost")
        return np.zeros((len(x), 3))


class NoGradient(ClassifierBackend):
    supports_input_gradient = False

    def __init__(self, inner):
        self.inner = inner
        self.num_classes = inner.num_classes
        self.input_shape = inner.input_shape

    def _forward(self, x):
        return self.inner.forward(x)


# --------------------------------------------------------------------------
# greedy search


def test_single_dot_matches_exhaustive_search():
    clf, tm, xs = linear_model(), threat_model(), images()
    res = greedy_coordinate_descent(AttackConfig(0, 2, 1, tm), clf, xs)
    options = [(g, p) for g in range(len(tm.grid)) for p in range(len(PALETTE))]
    losses = [dense_loss([tm.dot(g, p)], xs, clf) for g, p in options]
    best = int(np.argmax(losses))
    assert max(losses) > dense_loss([], xs, clf)
    assert res.assignments == [options[best]]
    assert res.final_loss == pytest.approx(losses[best], rel=1e-6)


def test_two_dots_within_pair_search():
    clf, xs = linear_model(1), images(3, 2)
    tm = threat_model(cells=4, palette=PALETTE[:2], radius=3.0)
    res = greedy_coordinate_descent(AttackConfig(0, 2, 2, tm), clf, xs)
    singles = [tm.dot(g, p) for g in range(len(tm.grid)) for p in range(2)]
    best_pair = max(dense_loss([a, b], xs, clf) for a, b in itertools.product(singles, repeat=2))
    best_single = max(dense_loss([a], xs, clf) for a in singles)
    assert best_single - 1e-6 <= res.final_loss <= best_pair + 1e-6


def test_trace_is_monotone():
    net = conv_model(0)
    res = greedy_coordinate_descent(AttackConfig(0, 1, 3, threat_model(), max_sweeps=4, tol=0.0), net, images(5, size=24))
    losses = [l for _, l in res.loss_trace]
    assert all(b >= a - 1e-9 for a, b in zip(losses, losses[1:]))
    assert [s for s, _ in res.loss_trace] == list(range(len(losses)))


def test_zero_dots():
    res = greedy_coordinate_descent(AttackConfig(0, 2, 0, threat_model()), linear_model(), images())
    assert len(res.pattern) == 0 and len(res.loss_trace) == 1
    assert res.loss_trace[0][1] == pytest.approx(dense_loss([], images(), linear_model()))


def test_ties_pick_first_grid_cell_and_color():
    res = greedy_coordinate_descent(AttackConfig(0, 1, 2, threat_model()), ConstantClassifier([0.0, 0.0, 0.0]), images())
    assert res.assignments == [(0, 0), (0, 0)]


def test_invisible_when_every_dot_hurts():
    # the target logit falls with brightness, so any dot on a black image hurts
    W = np.zeros((3, SIZE * SIZE * 3))
    W[2] = -1.0
    clf = LinearClassifier(W, np.zeros(3), (SIZE, SIZE))
    tm = threat_model(palette=((1.0, 1.0, 1.0),))
    res = greedy_coordinate_descent(AttackConfig(0, 2, 2, tm), clf, np.zeros((2, SIZE, SIZE, 3)))
    assert res.assignments == [None, None] and len(res.pattern) == 0
    res = greedy_coordinate_descent(AttackConfig(0, 2, 1, tm, allow_invisible=False), clf, np.zeros((2, SIZE, SIZE, 3)))
    assert res.assignments[0] is not None and len(res.pattern) == 1


def test_threads_do_not_change_the_result():
    net = conv_model(1)
    net.concurrency_safe = False
    cfg = AttackConfig(0, 1, 2, threat_model(), candidate_batch=40)
    a = greedy_coordinate_descent(cfg, net, images(5, size=24))
    b = greedy_coordinate_descent(AttackConfig(**{**cfg.__dict__, "threads": 3}), net, images(5, size=24))
    assert a.assignments == b.assignments and a.loss_trace == b.loss_trace


def test_subsample_finishes_on_full_set():
    clf, xs = linear_model(2), images(8, 3)
    res = greedy_coordinate_descent(AttackConfig(0, 2, 2, threat_model(), subsample=3, max_sweeps=3), clf, xs)
    assert len(res.subsample_indices) == 3
    assert res.full_set_from is not None and res.full_set_from < len(res.loss_trace)
    assert res.loss_trace[-1][1] == pytest.approx(targeted_universal_loss(res.pattern, xs, 0, 2, clf), rel=1e-9)
    full = [l for _, l in res.loss_trace[res.full_set_from :]]
    assert all(b >= a - 1e-9 for a, b in zip(full, full[1:]))


def test_config_validation():
    with pytest.raises(ValueError, match="differ"):
        AttackConfig(1, 1, 2, threat_model())
    with pytest.raises(ValueError, match="num_dots"):
        AttackConfig(0, 1, 11, threat_model())


def test_result_round_trip():
    res = run_attack(AttackConfig(0, 2, 2, threat_model(), fine_tune_steps=3), linear_model(), images())
    back = AttackResult.from_dict(res.to_dict())
    assert back.to_dict() == res.to_dict()


# --------------------------------------------------------------------------
# loss and gradients


def test_loss_errors_carry_batch_position():
    with pytest.raises(AttackError, match="starting at image 2"):
        targeted_universal_loss([], images(5), 0, 1, FailingClassifier(fail_at=2))
    with pytest.raises(ValueError, match="class index 5"):
        targeted_universal_loss([], images(2), 0, 5, linear_model())
    with pytest.raises(ValueError, match="non-empty"):
        targeted_universal_loss([], np.zeros((0, SIZE, SIZE, 3)), 0, 1, linear_model())


def test_param_gradients_match_finite_differences():
    net = conv_model(2)
    net.forward_dtype = np.dtype("float64")
    # interior colors so central differences are not clipped
    tm = threat_model(palette=((0.8, 0.3, 0.2), (0.1, 0.5, 0.9)))
    dots = [tm.dot(20, 0), tm.dot(57, 1)]
    xs = images(3, size=24)
    _, g = loss_and_param_grads(dots, xs, 0, 1, net)
    coords = [(k, j) for k in range(2) for j in range(8)]
    fd = _fd_param_grads(dots, xs, 0, 1, net, coords, 1e-5)
    assert np.all(rel_err(g, fd, floor=1e-5) < 1e-3)


# --------------------------------------------------------------------------
# fine-tuning


def test_fine_tune_is_monotone_and_clamped():
    net = conv_model(3)
    cfg = AttackConfig(0, 1, 3, threat_model(), fine_tune_steps=30, tol=0.0)
    xs = images(4, size=24)
    res = fine_tune_positions(greedy_coordinate_descent(cfg, net, xs), cfg, net, xs)
    tr = res.fine_tune_trace
    assert all(b >= a - 1e-9 for a, b in zip(tr, tr[1:]))
    assert tr[-1] == pytest.approx(targeted_universal_loss(res.pattern, xs, 0, 1, net), rel=1e-9)
    for d in res.pattern:
        r = d.radius
        assert -r <= d.center[0] <= 23 + r and -r <= d.center[1] <= 23 + r


def test_fine_tune_keeps_color_and_shape():
    clf = linear_model(4)
    cfg = AttackConfig(0, 2, 2, threat_model(), fine_tune_steps=10)
    xs = images(3)
    greedy = greedy_coordinate_descent(cfg, clf, xs)
    tuned = fine_tune_positions(greedy, cfg, clf, xs)
    for a, b in zip(greedy.pattern, tuned.pattern):
        assert (a.color, a.radius, a.alpha_max, a.beta) == (b.color, b.radius, b.alpha_max, b.beta)
    assert tuned.fine_tune_trace[-1] >= greedy.final_loss - 1e-9


def test_fine_tune_without_gradients():
    clf = NoGradient(linear_model(5))
    cfg = AttackConfig(0, 2, 1, threat_model(), fine_tune_steps=5)
    xs = images(2)
    greedy = greedy_coordinate_descent(cfg, clf, xs)
    with pytest.raises(GradientUnavailable, match="--finite-difference"):
        fine_tune_positions(greedy, cfg, clf, xs)
    res = fine_tune_positions(greedy, cfg, clf, xs, finite_difference=True)
    tr = res.fine_tune_trace
    assert len(tr) >= 1 and all(b >= a - 1e-9 for a, b in zip(tr, tr[1:]))


# --------------------------------------------------------------------------
# unconstrained baseline


def test_pgd_bounds_scale_with_image():
    b = PGDBounds.for_image(64, 64)
    assert b.upper[5] == pytest.approx(60 * 64 / 224)
    assert b.lower[5] == 1.0 and b.upper[3] == 64.0
    theta = np.full((2, 8), 100.0)
    assert np.array_equal(b.project(theta)[0], np.asarray(b.upper))
    assert len(PGD_STEP_SCALE) == 8


def test_pgd_stays_in_bounds_and_improves():
    net = conv_model(4)
    bounds = PGDBounds.for_image(24, 24, radius=(1.0, 40.0))
    xs = images(3, size=24)
    seen = []
    pat = pgd_unconstrained(xs, 0, 1, 2, bounds, net, steps=15, seed=1, callback=lambda th: seen.append(th.copy()))
    lo, hi = np.asarray(bounds.lower), np.asarray(bounds.upper)
    assert len(seen) >= 2
    assert all(np.all(th >= lo) and np.all(th <= hi) for th in seen)
    losses = [targeted_universal_loss([DotParams.from_vector(v) for v in th], xs, 0, 1, net) for th in seen]
    assert all(b >= a - 1e-9 for a, b in zip(losses, losses[1:]))
    assert targeted_universal_loss(pat, xs, 0, 1, net) == pytest.approx(losses[-1], rel=1e-9)


def test_pgd_from_greedy_start_does_not_lose():
    clf = linear_model(6)
    cfg = AttackConfig(0, 2, 2, threat_model())
    xs = images(3)
    greedy = greedy_coordinate_descent(cfg, clf, xs)
    bounds = PGDBounds.for_image(SIZE, SIZE, radius=(1.0, 40.0))
    pat = pgd_unconstrained(xs, 0, 2, 2, bounds, clf, steps=10, init=greedy.pattern)
    assert targeted_universal_loss(pat, xs, 0, 2, clf) >= greedy.final_loss - 1e-9
