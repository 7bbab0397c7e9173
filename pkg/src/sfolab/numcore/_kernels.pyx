# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled dense-layer kernels.

Row-major arrays are handed to column-major BLAS as their transposes, so each
GEMM below reads as the transposed product of what the numpy fallback does.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport erf, exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

DEF ACT_IDENTITY = 0
DEF ACT_TANH = 1
DEF ACT_GELU = 2

cdef double INV_SQRT2 = 0.70710678118654752440
cdef double INV_SQRT2PI = 0.39894228040143267794


def dense_forward(double[:, ::1] x, double[:, ::1] w, double[::1] b, int act):
    """Return ``(h, dact)`` with ``h = act(x @ w.T + b)`` and ``dact = act'(z)``."""
    cdef int n = x.shape[0]
    cdef int i = x.shape[1]
    cdef int o = w.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] h_arr = np.empty((n, o), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_arr = np.empty((n, o), dtype=np.float64)
    cdef double[:, ::1] h = h_arr
    cdef double[:, ::1] d = d_arr
    cdef double alpha = 1.0, beta = 0.0
    cdef char transa = b'T', transb = b'N'
    cdef int r, c
    cdef double z, y, cdf
    if n == 0 or o == 0:
        return h_arr, d_arr
    if i == 0:
        h_arr.fill(0.0)
    else:
        dgemm(&transa, &transb, &o, &n, &i, &alpha, &w[0, 0], &i, &x[0, 0], &i,
              &beta, &h[0, 0], &o)
    if act == ACT_TANH:
        # numpy's vectorized tanh is several times faster than a scalar libm loop
        with nogil:
            for r in range(n):
                for c in range(o):
                    h[r, c] += b[c]
        np.tanh(h_arr, out=h_arr)
        with nogil:
            for r in range(n):
                for c in range(o):
                    y = h[r, c]
                    d[r, c] = 1.0 - y * y
        return h_arr, d_arr
    with nogil:
        for r in range(n):
            for c in range(o):
                z = h[r, c] + b[c]
                if act == ACT_GELU:
                    cdf = 0.5 * (1.0 + erf(z * INV_SQRT2))
                    h[r, c] = z * cdf
                    d[r, c] = cdf + z * INV_SQRT2PI * exp(-0.5 * z * z)
                else:
                    h[r, c] = z
                    d[r, c] = 1.0
    return h_arr, d_arr


def dense_backward(double[:, ::1] x, double[:, ::1] w, double[:, ::1] dact,
                   double[:, ::1] upstream):
    """Return ``(dw, db, dx)`` for a layer whose forward was ``dense_forward``."""
    cdef int n = x.shape[0]
    cdef int i = x.shape[1]
    cdef int o = w.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gz_arr = np.empty((n, o), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dw_arr = np.zeros((o, i), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] db_arr = np.zeros(o, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dx_arr = np.zeros((n, i), dtype=np.float64)
    cdef double[:, ::1] gz = gz_arr
    cdef double[:, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] dx = dx_arr
    cdef double alpha = 1.0, beta = 0.0
    cdef char nt = b'N', tt = b'T'
    cdef int r, c
    with nogil:
        for r in range(n):
            for c in range(o):
                gz[r, c] = upstream[r, c] * dact[r, c]
                db[c] += gz[r, c]
    if n == 0 or o == 0 or i == 0:
        return dw_arr, db_arr, dx_arr
    dgemm(&nt, &tt, &i, &o, &n, &alpha, &x[0, 0], &i, &gz[0, 0], &o,
          &beta, &dw[0, 0], &i)
    dgemm(&nt, &nt, &i, &n, &o, &alpha, &w[0, 0], &i, &gz[0, 0], &o,
          &beta, &dx[0, 0], &i)
    return dw_arr, db_arr, dx_arr
