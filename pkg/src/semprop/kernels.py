"""Convolution lowering kernels, compiled when available.

The compiled extension is preferred; set ``SEMPROP_PURE_PYTHON=1`` to force
the numpy fallback (useful for benchmarking and for platforms without a C
compiler).
"""

import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("SEMPROP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["BACKEND", "im2col", "col2im"]
