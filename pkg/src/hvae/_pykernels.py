"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` must agree with them to
rounding. All arrays are float64 and C-contiguous.
"""

import numpy as np
from scipy.special import erf, erfc

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327
BIN_HALF_WIDTH = 1.0 / 255.0


def im2col(x, k):
    """(B, C, H, W) -> (C*k*k, B*H*W) patch matrix with zero "same" padding.

    Row (c*k + di)*k + dj holds input channel c shifted by (di - k//2, dj - k//2).
    """
    B, C, H, W = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))).transpose(1, 0, 2, 3)
    cols = np.empty((C, k, k, B, H, W))
    for di in range(k):
        for dj in range(k):
            cols[:, di, dj] = xp[:, :, di:di + H, dj:dj + W]
    return cols.reshape(C * k * k, B * H * W)


def col2im(cols, B, C, H, W, k):
    """Adjoint of :func:`im2col`: scatter-add patches back onto the image."""
    p = k // 2
    cols = cols.reshape(C, k, k, B, H, W)
    xp = np.zeros((C, B, H + 2 * p, W + 2 * p))
    for di in range(k):
        for dj in range(k):
            xp[:, :, di:di + H, dj:dj + W] += cols[:, di, dj]
    return np.ascontiguousarray(xp[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3))


def _normal_pdf(u):
    out = np.zeros_like(u)
    fin = np.isfinite(u)
    out[fin] = _INV_SQRT_2PI * np.exp(-0.5 * u[fin] ** 2)
    return out


def _bin_mass(lo, hi):
    # Phi(hi) - Phi(lo), picking the form that avoids cancellation.
    upper = lo > 0
    lower = hi < 0
    mid = ~(upper | lower)
    mass = np.empty_like(lo)
    mass[upper] = 0.5 * (erfc(lo[upper] * _SQRT1_2) - erfc(hi[upper] * _SQRT1_2))
    mass[lower] = 0.5 * (erfc(-hi[lower] * _SQRT1_2) - erfc(-lo[lower] * _SQRT1_2))
    mass[mid] = 0.5 * (erf(hi[mid] * _SQRT1_2) - erf(lo[mid] * _SQRT1_2))
    return mass


def disc_gauss(x, mean, logvar, floor):
    """Per-element log bin mass of N(mean, exp(logvar)) on the 256-level grid.

    Returns ``(logp, dlogp/dmean, dlogp/dlogvar)``. Edge bins extend to
    +-infinity; masses are floored at ``floor`` and floored entries get zero
    gradient.
    """
    x, mean, logvar = np.broadcast_arrays(x, mean, logvar)
    inv_sigma = np.exp(-0.5 * logvar)
    lo = np.where(x <= -1.0, -np.inf, (x - BIN_HALF_WIDTH - mean) * inv_sigma)
    hi = np.where(x >= 1.0, np.inf, (x + BIN_HALF_WIDTH - mean) * inv_sigma)
    mass = _bin_mass(lo, hi)
    ok = mass > floor
    logp = np.log(np.where(ok, mass, floor))

    pdf_hi = _normal_pdf(hi)
    pdf_lo = _normal_pdf(lo)
    upd_hi = np.where(np.isfinite(hi), hi, 0.0) * pdf_hi
    upd_lo = np.where(np.isfinite(lo), lo, 0.0) * pdf_lo
    safe = np.where(ok, mass, 1.0)
    dmean = np.where(ok, -(pdf_hi - pdf_lo) * inv_sigma / safe, 0.0)
    dlogvar = np.where(ok, -0.5 * (upd_hi - upd_lo) / safe, 0.0)
    return logp, dmean, dlogvar
