# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled greedy-selection residual kernel.

Same contract as _greedy_pure: rank-one downdates of the residual
second-moment matrix with fused row-norm maintenance. The fused single pass
avoids the matvec/outer-product temporaries of the NumPy fallback, which is
what makes the per-step cost worthwhile for wide layers.
"""

import numpy as np

from libc.math cimport sqrt


def residual_init(sigma):
    """Copy sigma into mutable kernel state: (R, rownorm2)."""
    r = np.array(sigma, dtype=np.float64, order="C")
    rownorm2 = np.empty(r.shape[0], dtype=np.float64)
    cdef double[:, ::1] rv = r
    cdef double[::1] nv = rownorm2
    cdef Py_ssize_t i, j, m = rv.shape[0]
    cdef double acc
    for i in range(m):
        acc = 0.0
        for j in range(m):
            acc += rv[i, j] * rv[i, j]
        nv[i] = acc
    return r, rownorm2


def residual_update(double[:, ::1] r, double[::1] rownorm2, Py_ssize_t isel,
                    double ridge):
    """Absorb index isel into the selected set; returns the trace gain."""
    cdef Py_ssize_t m = r.shape[0]
    cdef double pivot = r[isel, isel] + ridge
    if pivot <= 0.0:
        return 0.0
    zbuf = np.empty(m, dtype=np.float64)
    cdef double[::1] z = zbuf
    cdef double inv = 1.0 / sqrt(pivot)
    cdef double zz = 0.0
    cdef double y, zi
    cdef Py_ssize_t i, j
    for j in range(m):
        zi = r[isel, j] * inv
        z[j] = zi
        zz += zi * zi
    for i in range(m):
        zi = z[i]
        y = 0.0
        for j in range(m):
            y += r[i, j] * z[j]
        for j in range(m):
            r[i, j] -= zi * z[j]
        rownorm2[i] += zi * (zi * zz - 2.0 * y)
    return zz
