import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camsticker.ssim import C1, C2, SSIMReference, ssim, ssim_pixel_gradient
from oracles import rel_err


def constant_ssim(a, b):
    # closed form for two constant images: zero variance and covariance
    return ((2 * a * b + C1) * C2) / ((a * a + b * b + C1) * C2)


def test_identity(kernel_backend):
    x = np.random.default_rng(0).random((20, 24, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_constant_images_match_closed_form(kernel_backend):
    z, o = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    assert ssim(z, o) == pytest.approx(constant_ssim(0.0, 1.0), rel=1e-9)
    assert ssim(z, o) <= 0.01
    a, b = np.full((15, 15, 3), 0.3), np.full((15, 15, 3), 0.6)
    assert ssim(a, b) == pytest.approx(constant_ssim(0.3, 0.6), rel=1e-9)


def test_symmetry_on_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = rng.random((2, 14, 17, 3))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_shape_errors():
    with pytest.raises(ValueError, match="shape"):
        ssim(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))
    with pytest.raises(ValueError, match="11x11"):
        ssim(np.zeros((10, 12, 3)), np.zeros((10, 12, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0))
def test_bounds(seed, mix):
    rng = np.random.default_rng(seed)
    a = rng.random((12, 12, 3))
    b = mix * a + (1 - mix) * rng.random((12, 12, 3))
    v = ssim(a, 1 - b if seed % 2 else b)
    assert -1.0 <= v <= 1.0


def test_gradient_probes_match_finite_differences(kernel_backend):
    rng = np.random.default_rng(2)
    a, b = rng.random((2, 32, 32, 3))
    g = ssim_pixel_gradient(a, b)
    ref = SSIMReference(b)
    h = 1e-4
    for _ in range(20):
        i, j, c = rng.integers(32), rng.integers(32), rng.integers(3)
        ap, am = a.copy(), a.copy()
        ap[i, j, c] += h
        am[i, j, c] -= h
        fd = (ref.value(ap) - ref.value(am)) / (2 * h)
        assert rel_err(g[i, j, c], fd, floor=1e-8) < 1e-3


def test_gradient_at_optimum_is_flat():
    x = np.random.default_rng(3).random((24, 24, 3))
    g = ssim_pixel_gradient(x, x)
    step = 1e-4 * g / max(np.max(np.abs(g)), 1e-300)
    assert abs(ssim(np.clip(x + step, 0, 1), x) - 1.0) <= 1e-6


def test_gradient_uniform_for_constant_images(kernel_backend):
    g = ssim_pixel_gradient(np.full((40, 40, 3), 0.3), np.full((40, 40, 3), 0.7))
    # pixels in [10, 30) are covered by a full set of windows
    inner = g[10:30, 10:30]
    assert np.ptp(inner) <= 1e-12 * np.max(np.abs(inner))
    assert np.max(np.abs(inner)) > 0


def test_reference_cache_matches_direct(kernel_backend):
    rng = np.random.default_rng(4)
    a, b = rng.random((2, 18, 18, 3))
    ref = SSIMReference(b)
    v, g = ref.value_and_grad(a)
    assert v == pytest.approx(ssim(a, b), abs=1e-15)
    assert np.allclose(g, ssim_pixel_gradient(a, b), atol=1e-15)


def test_filter_kernels_agree_and_are_adjoint():
    from camsticker import _pykernels

    try:
        from camsticker import _ckernels
    except ImportError:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(5)
    taps = rng.random(5)  # asymmetric on purpose
    x, z = rng.random((9, 12, 2)), rng.random((5, 8, 2))
    for mod in (_pykernels, _ckernels):
        lhs = np.sum(mod.filter_valid(x, taps) * z)
        assert lhs == pytest.approx(np.sum(x * mod.filter_adjoint(z, taps)), rel=1e-12)
    assert np.allclose(_ckernels.filter_valid(x, taps), _pykernels.filter_valid(x, taps), atol=1e-14)
    assert np.allclose(_ckernels.filter_adjoint(z, taps), _pykernels.filter_adjoint(z, taps), atol=1e-14)
