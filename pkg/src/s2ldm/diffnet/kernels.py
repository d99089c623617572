"""Backend selection for the convolution gather/scatter kernels.

The compiled extension is used when it imports; set ``S2LDM_PURE_PYTHON=1``
to force the numpy fallback. Both backends produce bit-identical results.
"""
import os

import numpy as np

from . import _kernels_py

_py_im2col = _kernels_py.im2col
_py_col2im = _kernels_py.col2im

try:
    if os.environ.get("S2LDM_PURE_PYTHON") == "1":
        raise ImportError("pure-python backend forced")
    from ._ckernels import col2im as _c_col2im, im2col as _c_im2col
except ImportError:
    _c_im2col = _c_col2im = None

BACKEND = "cython" if _c_im2col is not None else "python"


def available_backends():
    return ["cython", "python"] if _c_im2col is not None else ["python"]


def _pick(backend):
    backend = backend or BACKEND
    if backend == "cython":
        if _c_im2col is None:
            raise ValueError("cython kernels are not built")
        return _c_im2col, _c_col2im
    if backend == "python":
        return _py_im2col, _py_col2im
    raise ValueError(f"unknown kernel backend {backend!r}")


def _float_array(a):
    a = np.asarray(a)
    dtype = a.dtype if a.dtype in (np.float32, np.float64) else np.float64
    return np.ascontiguousarray(a, dtype=dtype)


def im2col(x, k, stride, pad, backend=None):
    """Unfold ``x`` (N, H, W, C) into (N, Ho, Wo, k*k*C) patch rows."""
    fn, _ = _pick(backend)
    return fn(_float_array(x), int(k), int(stride), int(pad))


def col2im(cols, shape, k, stride, pad, backend=None):
    """Adjoint of :func:`im2col`: scatter-add patch rows into an (N, H, W, C) grid."""
    _, fn = _pick(backend)
    _, h, w, c = shape
    return fn(_float_array(cols), int(h), int(w), int(c), int(k), int(stride), int(pad))
