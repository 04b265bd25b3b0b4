"""Independent reference implementations used as test oracles."""

import numpy as np


def dense_apply_pattern(x, dots):
    """Literal per-pixel evaluation of the dot model over the whole frame, no cutoff."""
    y = np.array(x, dtype=np.float64)
    h, w, _ = y.shape
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    for v in dots:
        v = np.asarray(v, dtype=np.float64)
        color, ci, cj, r, amax, beta = v[0:3], v[3], v[4], v[5], v[6], v[7]
        d = ((ii - ci) ** 2 + (jj - cj) ** 2) / r**2
        d = np.maximum(d, 1e-12)
        a = amax * np.exp(-(d**beta))
        y = (1 - a)[..., None] * y + a[..., None] * color
    return y


def central_diff(f, x0, step):
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for idx in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp.flat[idx] += step
        xm.flat[idx] -= step
        g.flat[idx] = (f(xp) - f(xm)) / (2 * step)
    return g


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
