"""Pure-numpy versions of the dot kernels.

Signatures mirror ``_ckernels.pyx`` exactly; ``camsticker.kernels`` picks one
implementation at import time.
"""

import numpy as np
from scipy.ndimage import correlate1d

D_FLOOR = 1e-12


def alpha_block(ci, cj, r, amax, beta, i0, i1, j0, j1):
    ii = np.arange(i0, i1, dtype=np.float64)[:, None] - ci
    jj = np.arange(j0, j1, dtype=np.float64)[None, :] - cj
    d = np.maximum((ii * ii + jj * jj) / (r * r), D_FLOOR)
    return amax * np.exp(-(d ** beta))


def blend(imgs, ci, cj, r, amax, beta, color, i0, i1, j0, j1):
    """Blend one dot into every image of a (N, H, W, 3) stack, in place."""
    if i1 <= i0 or j1 <= j0:
        return
    a = alpha_block(ci, cj, r, amax, beta, i0, i1, j0, j1)[None, :, :, None]
    block = imgs[:, i0:i1, j0:j1, :]
    block += a * (np.asarray(color, dtype=np.float64) - block)


def dot_backward(g, yprev, ci, cj, r, amax, beta, color, i0, i1, j0, j1):
    """Parameter gradient of one blend step; rescales ``g`` in place by (1 - alpha).

    Returns [d_color(3), d_ci, d_cj, d_r, d_amax, d_beta].
    """
    out = np.zeros(8)
    if i1 <= i0 or j1 <= j0:
        return out
    ii = np.arange(i0, i1, dtype=np.float64)[:, None] - ci
    jj = np.arange(j0, j1, dtype=np.float64)[None, :] - cj
    r2 = r * r
    d = np.maximum((ii * ii + jj * jj) / r2, D_FLOOR)
    u = d ** beta
    e = np.exp(-u)
    a = amax * e
    gb = g[i0:i1, j0:j1, :]
    diff = np.asarray(color, dtype=np.float64) - yprev[i0:i1, j0:j1, :]
    out[0:3] = np.einsum("ij,ijc->c", a, gb)
    g_alpha = np.einsum("ijc,ijc->ij", gb, diff)
    # dL/du, then through d = dist^2 / r^2
    g_u = -g_alpha * a
    g_d = g_u * beta * u / d
    out[3] = np.sum(g_d * (-2.0 * ii / r2))
    out[4] = np.sum(g_d * (-2.0 * jj / r2))
    out[5] = np.sum(g_d * (-2.0 * d / r))
    out[6] = np.sum(g_alpha * e)
    out[7] = np.sum(g_u * u * np.log(d))
    gb *= (1.0 - a)[:, :, None]
    return out


def filter_valid(x, taps):
    """Separable correlation of an (H, W, C) image, valid positions only."""
    m = len(taps)
    h, w = x.shape[:2]
    if h < m or w < m:
        raise ValueError(f"image {h}x{w} is smaller than the {m}-tap window")
    pad = m // 2
    y = correlate1d(x, taps, axis=0, mode="constant")
    y = correlate1d(y, taps, axis=1, mode="constant")
    return y[pad : h - (m - 1 - pad), pad : w - (m - 1 - pad)]


def filter_adjoint(g, taps):
    """Adjoint of ``filter_valid``: maps an (Ho, Wo, C) array back to (Ho + m - 1, Wo + m - 1, C)."""
    m = len(taps)
    ho, wo, c = g.shape
    full = np.zeros((ho + m - 1, wo + m - 1, c))
    pad = m // 2
    full[pad : pad + ho, pad : pad + wo] = g
    # the adjoint of correlation is correlation with the reversed taps
    y = correlate1d(full, taps[::-1], axis=0, mode="constant")
    return correlate1d(y, taps[::-1], axis=1, mode="constant")


def ssim_moments(a, b, taps):
    """Windowed E[a], E[a^2] and E[ab] at valid positions."""
    if a.shape != b.shape:
        raise ValueError("ssim_moments inputs differ in shape")
    return filter_valid(a, taps), filter_valid(a * a, taps), filter_valid(a * b, taps)


def ssim_backward(d_mu, d_eaa, d_eab, a, b, taps):
    """Pixel gradient from the partials w.r.t. E[a], E[a^2] and E[ab]."""
    if a.shape[:2] != (d_mu.shape[0] + len(taps) - 1, d_mu.shape[1] + len(taps) - 1):
        raise ValueError("ssim_backward image shape does not match the partials")
    return filter_adjoint(d_mu, taps) + 2 * a * filter_adjoint(d_eaa, taps) + b * filter_adjoint(d_eab, taps)
