# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled lag-window and geometric-filter kernels.

Same contracts as ``_kernels_py``; inputs arrive as C-contiguous float64
arrays already reshaped by ``panel_fegmm.kernels``.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def window_sum_3d(double[:, :, ::1] u, Py_ssize_t ell, bint two_sided):
    cdef Py_ssize_t n = u.shape[0], T = u.shape[1], q = u.shape[2]
    out_arr = np.zeros((n, T, q), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] acc = np.zeros(q, dtype=np.float64)
    cdef Py_ssize_t i, t, k, hi, lo
    for i in range(n):
        for k in range(q):
            acc[k] = 0.0
        # running sum over the window [t - ell, hi(t)]
        hi = -1
        lo = 0
        for t in range(T):
            while hi < (t + ell if two_sided else t) and hi < T - 1:
                hi += 1
                for k in range(q):
                    acc[k] += u[i, hi, k]
            while lo < t - ell:
                for k in range(q):
                    acc[k] -= u[i, lo, k]
                lo += 1
            for k in range(q):
                out[i, t, k] = acc[k]
    return out_arr


def geometric_filter_2d(double[:, ::1] x, double rho, Py_ssize_t nterms,
                        Py_ssize_t start, bint forward):
    cdef Py_ssize_t n = x.shape[0], L = x.shape[1]
    cdef Py_ssize_t span = start + nterms - 1
    cdef Py_ssize_t m = L - span
    if m <= 0:
        raise ValueError("series too short for the requested number of terms")
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] w = np.empty(nterms, dtype=np.float64)
    cdef Py_ssize_t i, t, s
    cdef double acc
    for s in range(nterms):
        w[s] = rho ** (start + s)
    for i in range(n):
        for t in range(m):
            acc = 0.0
            if forward:
                for s in range(nterms):
                    acc += w[s] * x[i, t + start + s]
            else:
                for s in range(nterms):
                    acc += w[s] * x[i, t + span - start - s]
            out[i, t] = acc
    return out_arr
