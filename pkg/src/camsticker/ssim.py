"""Windowed SSIM with an analytic gradient.

11x11 Gaussian window (sigma 1.5), C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 1,
evaluated at every fully-contained window position and averaged over positions
and channels.
"""

import numpy as np

from . import kernels

WIN = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _gaussian_taps(size=WIN, sigma=SIGMA):
    t = np.arange(size) - (size - 1) / 2
    k = np.exp(-(t**2) / (2 * sigma**2))
    return k / k.sum()


TAPS = _gaussian_taps()


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[0] < WIN or a.shape[1] < WIN:
        raise ValueError(f"SSIM needs (H, W, C) images of at least {WIN}x{WIN}, got {a.shape}")
    return a, b


class SSIMReference:
    """Caches the reference-side statistics so repeated comparisons against
    one image (as in model fitting) only filter the moving image."""

    def __init__(self, b):
        b = np.asarray(b, dtype=np.float64)
        _check_pair(b, b)
        self.b = np.ascontiguousarray(b)
        self.mu_b, e_bb, _ = kernels.ssim_moments(self.b, self.b, TAPS)
        self.var_b = e_bb - self.mu_b**2

    def _terms(self, a):
        if a.shape != self.b.shape:
            raise ValueError(f"SSIM inputs differ in shape: {a.shape} vs {self.b.shape}")
        mu_a, e_aa, e_ab = kernels.ssim_moments(np.ascontiguousarray(a), self.b, TAPS)
        var_a = e_aa - mu_a**2
        cov = e_ab - mu_a * self.mu_b
        A1 = 2 * mu_a * self.mu_b + C1
        A2 = 2 * cov + C2
        B1 = mu_a**2 + self.mu_b**2 + C1
        B2 = var_a + self.var_b + C2
        return mu_a, A1, A2, B1, B2

    def value(self, a) -> float:
        a = np.asarray(a, dtype=np.float64)
        _, A1, A2, B1, B2 = self._terms(a)
        return float(np.mean((A1 * A2) / (B1 * B2)))

    def value_and_grad(self, a, terms=None):
        a = np.asarray(a, dtype=np.float64)
        mu_a, A1, A2, B1, B2 = terms if terms is not None else self._terms(a)
        S = (A1 * A2) / (B1 * B2)
        n = S.size
        mu_b = self.mu_b
        # partials w.r.t. mu_a, E[a^2], E[ab] with the variance terms expanded
        d_mu = S * (2 * mu_b / A1 - 2 * mu_a / B1 - 2 * mu_b / A2 + 2 * mu_a / B2)
        d_eaa = -S / B2
        d_eab = 2 * S / A2
        grad = kernels.ssim_backward(d_mu, d_eaa, d_eab, np.ascontiguousarray(a), self.b, TAPS) / n
        return float(np.mean(S)), grad


def ssim(a, b) -> float:
    a, b = _check_pair(a, b)
    return SSIMReference(b).value(a)


def ssim_pixel_gradient(a, b) -> np.ndarray:
    """d ssim(a, b) / d a, same shape as ``a``."""
    a, b = _check_pair(a, b)
    return SSIMReference(b).value_and_grad(a)[1]
