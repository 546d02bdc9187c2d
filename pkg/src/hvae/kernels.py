"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``HVAE_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("HVAE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

BIN_HALF_WIDTH = _pykernels.BIN_HALF_WIDTH


def im2col(x, k):
    """(B, C, H, W) -> (C*k*k, B*H*W) patches for a stride-1 "same" conv."""
    if k == 1:
        B, C, H, W = x.shape
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(C, B * H * W)
    return _impl.im2col(x, k)


def col2im(cols, B, C, H, W, k):
    if k == 1:
        return np.ascontiguousarray(cols.reshape(C, B, H, W).transpose(1, 0, 2, 3))
    return _impl.col2im(np.ascontiguousarray(cols), B, C, H, W, k)


def disc_gauss(x, mean, logvar, floor):
    return _impl.disc_gauss(x, mean, logvar, floor)
