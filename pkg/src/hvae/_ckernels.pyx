# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, erf, erfc, INFINITY

cnp.import_array()

cdef double SQRT1_2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327
cdef double HALF_BIN = 1.0 / 255.0


def im2col(double[:, :, :, ::1] x, int k):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t HW = H * W
    cdef int p = k // 2
    out = np.zeros((C * k * k, B * HW))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t b, c, di, dj, i, j, si, j0, j1, row, base
    with nogil:
        for c in range(C):
            for di in range(k):
                for dj in range(k):
                    row = (c * k + di) * k + dj
                    j0 = p - dj if dj < p else 0
                    j1 = W + p - dj if dj > p else W
                    for b in range(B):
                        base = b * HW
                        for i in range(H):
                            si = i + di - p
                            if si < 0 or si >= H:
                                continue
                            for j in range(j0, j1):
                                o[row, base + i * W + j] = x[b, c, si, j + dj - p]
    return out


def col2im(double[:, ::1] cols, int B, int C, int H, int W, int k):
    cdef Py_ssize_t HW = H * W
    cdef int p = k // 2
    out = np.zeros((B, C, H, W))
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, c, di, dj, i, j, si, j0, j1, row, base
    with nogil:
        for c in range(C):
            for di in range(k):
                for dj in range(k):
                    row = (c * k + di) * k + dj
                    j0 = p - dj if dj < p else 0
                    j1 = W + p - dj if dj > p else W
                    for b in range(B):
                        base = b * HW
                        for i in range(H):
                            si = i + di - p
                            if si < 0 or si >= H:
                                continue
                            for j in range(j0, j1):
                                o[b, c, si, j + dj - p] += cols[row, base + i * W + j]
    return out


cdef inline double _pdf(double u) nogil:
    if u == INFINITY or u == -INFINITY:
        return 0.0
    return INV_SQRT_2PI * exp(-0.5 * u * u)


def disc_gauss(x, mean, logvar, double floor):
    x, mean, logvar = np.broadcast_arrays(x, mean, logvar)
    shape = x.shape
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef double[::1] mv = np.ascontiguousarray(mean, dtype=np.float64).ravel()
    cdef double[::1] lv = np.ascontiguousarray(logvar, dtype=np.float64).ravel()
    cdef Py_ssize_t n = xv.shape[0], t
    logp = np.empty(n)
    dmean = np.empty(n)
    dlogvar = np.empty(n)
    cdef double[::1] lp = logp, dm = dmean, dl = dlogvar
    cdef double inv, lo, hi, mass, plo, phi, ulo, uhi
    with nogil:
        for t in range(n):
            inv = exp(-0.5 * lv[t])
            if xv[t] <= -1.0:
                lo = -INFINITY
            else:
                lo = (xv[t] - HALF_BIN - mv[t]) * inv
            if xv[t] >= 1.0:
                hi = INFINITY
            else:
                hi = (xv[t] + HALF_BIN - mv[t]) * inv
            if lo > 0:
                mass = 0.5 * (erfc(lo * SQRT1_2) - erfc(hi * SQRT1_2))
            elif hi < 0:
                mass = 0.5 * (erfc(-hi * SQRT1_2) - erfc(-lo * SQRT1_2))
            else:
                mass = 0.5 * (erf(hi * SQRT1_2) - erf(lo * SQRT1_2))
            if mass > floor:
                lp[t] = log(mass)
                phi = _pdf(hi)
                plo = _pdf(lo)
                uhi = hi * phi if phi != 0.0 else 0.0
                ulo = lo * plo if plo != 0.0 else 0.0
                dm[t] = -(phi - plo) * inv / mass
                dl[t] = -0.5 * (uhi - ulo) / mass
            else:
                lp[t] = log(floor)
                dm[t] = 0.0
                dl[t] = 0.0
    return logp.reshape(shape), dmean.reshape(shape), dlogvar.reshape(shape)
