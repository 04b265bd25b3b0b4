# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dot kernels. Same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, pow

cnp.import_array()

cdef double D_FLOOR = 1e-12


def alpha_block(double ci, double cj, double r, double amax, double beta,
                Py_ssize_t i0, Py_ssize_t i1, Py_ssize_t j0, Py_ssize_t j1):
    cdef Py_ssize_t h = max(i1 - i0, 0), w = max(j1 - j0, 0)
    out = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double di, dj, d, inv_r2 = 1.0 / (r * r)
    for i in range(h):
        di = (i0 + i) - ci
        for j in range(w):
            dj = (j0 + j) - cj
            d = (di * di + dj * dj) * inv_r2
            if d < D_FLOOR:
                d = D_FLOOR
            o[i, j] = amax * exp(-pow(d, beta))
    return out


def blend(double[:, :, :, ::1] imgs, double ci, double cj, double r,
          double amax, double beta, color,
          Py_ssize_t i0, Py_ssize_t i1, Py_ssize_t j0, Py_ssize_t j1):
    cdef Py_ssize_t n = imgs.shape[0], i, j, k
    cdef double di, dj, d, a, inv_r2 = 1.0 / (r * r)
    cdef double c0 = color[0], c1 = color[1], c2 = color[2]
    if i1 <= i0 or j1 <= j0:
        return
    with nogil:
        for i in range(i0, i1):
            di = i - ci
            for j in range(j0, j1):
                dj = j - cj
                d = (di * di + dj * dj) * inv_r2
                if d < D_FLOOR:
                    d = D_FLOOR
                a = amax * exp(-pow(d, beta))
                if a == 0.0:
                    continue
                for k in range(n):
                    imgs[k, i, j, 0] += a * (c0 - imgs[k, i, j, 0])
                    imgs[k, i, j, 1] += a * (c1 - imgs[k, i, j, 1])
                    imgs[k, i, j, 2] += a * (c2 - imgs[k, i, j, 2])


def dot_backward(double[:, :, ::1] g, const double[:, :, ::1] yprev,
                 double ci, double cj, double r, double amax, double beta, color,
                 Py_ssize_t i0, Py_ssize_t i1, Py_ssize_t j0, Py_ssize_t j1):
    out = np.zeros(8, dtype=np.float64)
    cdef double[::1] o = out
    cdef double c0 = color[0], c1 = color[1], c2 = color[2]
    cdef double di, dj, d, u, e, a, ga, gu, gd, r2 = r * r
    cdef double s_c0 = 0, s_c1 = 0, s_c2 = 0, s_i = 0, s_j = 0, s_r = 0, s_a = 0, s_b = 0
    cdef Py_ssize_t i, j
    if i1 <= i0 or j1 <= j0:
        return out
    with nogil:
        for i in range(i0, i1):
            di = i - ci
            for j in range(j0, j1):
                dj = j - cj
                d = (di * di + dj * dj) / r2
                if d < D_FLOOR:
                    d = D_FLOOR
                u = pow(d, beta)
                e = exp(-u)
                a = amax * e
                s_c0 += a * g[i, j, 0]
                s_c1 += a * g[i, j, 1]
                s_c2 += a * g[i, j, 2]
                ga = (g[i, j, 0] * (c0 - yprev[i, j, 0])
                      + g[i, j, 1] * (c1 - yprev[i, j, 1])
                      + g[i, j, 2] * (c2 - yprev[i, j, 2]))
                gu = -ga * a
                gd = gu * beta * u / d
                s_i += gd * (-2.0 * di / r2)
                s_j += gd * (-2.0 * dj / r2)
                s_r += gd * (-2.0 * d / r)
                s_a += ga * e
                s_b += gu * u * log(d)
                g[i, j, 0] *= 1.0 - a
                g[i, j, 1] *= 1.0 - a
                g[i, j, 2] *= 1.0 - a
    o[0] = s_c0; o[1] = s_c1; o[2] = s_c2
    o[3] = s_i; o[4] = s_j; o[5] = s_r; o[6] = s_a; o[7] = s_b
    return out


def filter_valid(const double[:, :, ::1] x, const double[::1] taps):
    """Separable correlation of an (H, W, C) image, valid positions only."""
    cdef Py_ssize_t h = x.shape[0], w = x.shape[1], c = x.shape[2], m = taps.shape[0]
    cdef Py_ssize_t ho = h - m + 1, wo = w - m + 1, row = w * c, rowo = wo * c
    cdef Py_ssize_t i, k, q
    cdef double t
    if ho <= 0 or wo <= 0:
        raise ValueError(f"image {h}x{w} is smaller than the {m}-tap window")
    tmp = np.zeros((ho, w, c), dtype=np.float64)
    out = np.zeros((ho, wo, c), dtype=np.float64)
    cdef double[:, :, ::1] tv = tmp
    cdef double[:, :, ::1] ov = out
    cdef const double* xp = &x[0, 0, 0]
    cdef double* tp = &tv[0, 0, 0]
    cdef double* op = &ov[0, 0, 0]
    with nogil:
        for i in range(ho):
            for k in range(m):
                t = taps[k]
                for q in range(row):
                    tp[i * row + q] += t * xp[(i + k) * row + q]
        for i in range(ho):
            for k in range(m):
                t = taps[k]
                for q in range(rowo):
                    op[i * rowo + q] += t * tp[i * row + k * c + q]
    return out


def filter_adjoint(const double[:, :, ::1] g, const double[::1] taps):
    """Adjoint of ``filter_valid``: maps an (Ho, Wo, C) array back to (Ho + m - 1, Wo + m - 1, C)."""
    cdef Py_ssize_t ho = g.shape[0], wo = g.shape[1], c = g.shape[2], m = taps.shape[0]
    cdef Py_ssize_t h = ho + m - 1, w = wo + m - 1, row = w * c, rowo = wo * c
    cdef Py_ssize_t i, k, q
    cdef double t
    tmp = np.zeros((ho, w, c), dtype=np.float64)
    out = np.zeros((h, w, c), dtype=np.float64)
    cdef double[:, :, ::1] tv = tmp
    cdef double[:, :, ::1] ov = out
    cdef const double* gp = &g[0, 0, 0]
    cdef double* tp = &tv[0, 0, 0]
    cdef double* op = &ov[0, 0, 0]
    with nogil:
        for i in range(ho):
            for k in range(m):
                t = taps[k]
                for q in range(rowo):
                    tp[i * row + k * c + q] += t * gp[i * rowo + q]
        for i in range(ho):
            for k in range(m):
                t = taps[k]
                for q in range(row):
                    op[(i + k) * row + q] += t * tp[i * row + q]
    return out


def ssim_moments(const double[:, :, ::1] a, const double[:, :, ::1] b, const double[::1] taps):
    """Windowed E[a], E[a^2] and E[ab] at valid positions, in one pass over the images."""
    cdef Py_ssize_t h = a.shape[0], w = a.shape[1], c = a.shape[2], m = taps.shape[0]
    cdef Py_ssize_t ho = h - m + 1, wo = w - m + 1, row = w * c, rowo = wo * c
    cdef Py_ssize_t i, k, q, s, so
    cdef double t, av, bv
    if ho <= 0 or wo <= 0:
        raise ValueError(f"image {h}x{w} is smaller than the {m}-tap window")
    if b.shape[0] != h or b.shape[1] != w or b.shape[2] != c:
        raise ValueError("ssim_moments inputs differ in shape")
    tmp = np.zeros((3, ho, w, c), dtype=np.float64)
    out = np.zeros((3, ho, wo, c), dtype=np.float64)
    cdef double[:, :, :, ::1] tv = tmp
    cdef double[:, :, :, ::1] ov = out
    cdef const double* ap = &a[0, 0, 0]
    cdef const double* bp = &b[0, 0, 0]
    cdef double* t0 = &tv[0, 0, 0, 0]
    cdef double* t1 = &tv[1, 0, 0, 0]
    cdef double* t2 = &tv[2, 0, 0, 0]
    cdef double* o0 = &ov[0, 0, 0, 0]
    cdef double* o1 = &ov[1, 0, 0, 0]
    cdef double* o2 = &ov[2, 0, 0, 0]
    with nogil:
        for i in range(ho):
            for k in range(m):
                t = taps[k]
                s = (i + k) * row
                for q in range(row):
                    av = ap[s + q]
                    bv = bp[s + q]
                    t0[i * row + q] += t * av
                    t1[i * row + q] += t * av * av
                    t2[i * row + q] += t * av * bv
        for i in range(ho):
            for k in range(m):
                t = taps[k]
                s = i * row + k * c
                so = i * rowo
                for q in range(rowo):
                    o0[so + q] += t * t0[s + q]
                    o1[so + q] += t * t1[s + q]
                    o2[so + q] += t * t2[s + q]
    return out[0], out[1], out[2]


def ssim_backward(const double[:, :, ::1] d_mu, const double[:, :, ::1] d_eaa, const double[:, :, ::1] d_eab,
                  const double[:, :, ::1] a, const double[:, :, ::1] b, const double[::1] taps):
    """Pixel gradient from the partials w.r.t. E[a], E[a^2] and E[ab]."""
    cdef Py_ssize_t ho = d_mu.shape[0], wo = d_mu.shape[1], c = d_mu.shape[2], m = taps.shape[0]
    cdef Py_ssize_t h = ho + m - 1, w = wo + m - 1, row = w * c, rowo = wo * c
    cdef Py_ssize_t i, k, p, q, s, so
    cdef double t
    if a.shape[0] != h or a.shape[1] != w or a.shape[2] != c:
        raise ValueError("ssim_backward image shape does not match the partials")
    tmp = np.zeros((3, ho, w, c), dtype=np.float64)
    rows = np.zeros((3, row), dtype=np.float64)
    cdef double[:, :, :, ::1] tv = tmp
    cdef double[:, ::1] rv = rows
    cdef const double* g0 = &d_mu[0, 0, 0]
    cdef const double* g1 = &d_eaa[0, 0, 0]
    cdef const double* g2 = &d_eab[0, 0, 0]
    cdef double* t0 = &tv[0, 0, 0, 0]
    cdef double* t1 = &tv[1, 0, 0, 0]
    cdef double* t2 = &tv[2, 0, 0, 0]
    cdef double* r0 = &rv[0, 0]
    cdef double* r1 = &rv[1, 0]
    cdef double* r2 = &rv[2, 0]
    cdef const double* ap = &a[0, 0, 0]
    cdef const double* bp = &b[0, 0, 0]
    out = np.empty((h, w, c), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef double* op = &ov[0, 0, 0]
    with nogil:
        # columns: spread each valid row back over the full width
        for i in range(ho):
            for k in range(m):
                t = taps[k]
                s = i * row + k * c
                so = i * rowo
                for q in range(rowo):
                    t0[s + q] += t * g0[so + q]
                    t1[s + q] += t * g1[so + q]
                    t2[s + q] += t * g2[so + q]
        # rows: gather the valid rows that cover output row p, then combine
        for p in range(h):
            for q in range(row):
                r0[q] = 0.0
                r1[q] = 0.0
                r2[q] = 0.0
            for k in range(m):
                i = p - k
                if i < 0 or i >= ho:
                    continue
                t = taps[k]
                s = i * row
                for q in range(row):
                    r0[q] += t * t0[s + q]
                    r1[q] += t * t1[s + q]
                    r2[q] += t * t2[s + q]
            s = p * row
            for q in range(row):
                op[s + q] = r0[q] + 2.0 * ap[s + q] * r1[q] + bp[s + q] * r2[q]
    return out
