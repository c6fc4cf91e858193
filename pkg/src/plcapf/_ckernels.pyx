# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: batched mixture reconstruction, Gaussian scoring and
CDF traversal for resampling.  Signatures mirror ``_pykernels``.

The matrix product goes straight to BLAS dgemm; scoring then reduces each
row in one pass without allocating the residual matrix.
"""

import numpy as np
from libc.math cimport log, M_PI
from scipy.linalg.cython_blas cimport dgemm


cdef void _product(const double[:, ::1] weights, const double[:, ::1] basis,
                   double[:, ::1] out) noexcept nogil:
    # row-major (N,K) @ (K,F) is column-major (F,K) @ (K,N)
    cdef int n_rows = <int>weights.shape[0], n_k = <int>basis.shape[0], n_f = <int>basis.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char trans = b'N'
    if n_rows == 0 or n_f == 0:
        return
    if n_k == 0:
        out[:, :] = 0.0
        return
    dgemm(&trans, &trans, &n_f, &n_rows, &n_k, &one,
          <double*>&basis[0, 0], &n_f, <double*>&weights[0, 0], &n_k,
          &zero, &out[0, 0], &n_f)


def reconstruct(const double[:, ::1] weights, const double[:, ::1] basis):
    """Rows of ``weights @ basis``."""
    if weights.shape[1] != basis.shape[0]:
        raise ValueError("weights and basis disagree on the number of components")
    result = np.empty((weights.shape[0], basis.shape[1]))
    cdef double[:, ::1] out = result
    with nogil:
        _product(weights, basis, out)
    return result


def mixture_loglik(const double[:, ::1] weights, const double[:, ::1] basis,
                   const double[::1] observed, double sigma):
    """Gaussian log-density of ``observed`` under each row's reconstruction."""
    cdef Py_ssize_t n, f, n_rows = weights.shape[0], n_f = basis.shape[1]
    if weights.shape[1] != basis.shape[0] or observed.shape[0] != n_f:
        raise ValueError("dimension mismatch between weights, basis and observation")
    result = np.empty(n_rows)
    pred_arr = np.empty((n_rows, n_f))
    cdef double[::1] out = result
    cdef double[:, ::1] pred = pred_arr
    cdef double ss, r
    cdef double const = -0.5 * n_f * log(2.0 * M_PI * sigma * sigma)
    cdef double inv = 1.0 / (2.0 * sigma * sigma)
    with nogil:
        _product(weights, basis, pred)
        for n in range(n_rows):
            ss = 0.0
            for f in range(n_f):
                r = observed[f] - pred[n, f]
                ss = ss + r * r
            out[n] = const - ss * inv
    return result


def cdf_traverse(const double[::1] cdf, const double[::1] positions):
    """For each sorted position u, the first index i with u <= cdf[i]."""
    cdef Py_ssize_t j, i = 0, n = cdf.shape[0], m = positions.shape[0]
    result = np.empty(m, dtype=np.intp)
    cdef Py_ssize_t[::1] out = result
    with nogil:
        for j in range(m):
            while i < n - 1 and positions[j] > cdf[i]:
                i += 1
            out[j] = i
    return result
