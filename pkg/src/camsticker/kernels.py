"""Hot-loop kernel selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``CAMSTICKER_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CAMSTICKER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

alpha_block = _impl.alpha_block
blend = _impl.blend
dot_backward = _impl.dot_backward
filter_valid = _impl.filter_valid
filter_adjoint = _impl.filter_adjoint
ssim_moments = _impl.ssim_moments
ssim_backward = _impl.ssim_backward

__all__ = ["BACKEND", "alpha_block", "blend", "dot_backward", "filter_adjoint", "filter_valid", "ssim_backward", "ssim_moments"]
