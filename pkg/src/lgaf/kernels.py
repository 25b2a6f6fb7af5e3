"""Backend selection for the conv2d hot loops.

The Cython extension ``lgaf._kernels`` is used when it was compiled at
install time; otherwise the numpy implementation in ``lgaf._fallback`` is
used. Setting ``LGAF_PURE_PYTHON=1`` forces the fallback. Both backends
produce bit-identical results.
"""
import os

from lgaf import _fallback

BACKEND = "python"
im2col = _fallback.im2col
col2im = _fallback.col2im

if os.environ.get("LGAF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from lgaf import _kernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "compiled"
        im2col = _kernels.im2col
        col2im = _kernels.col2im

__all__ = ["BACKEND", "im2col", "col2im"]
