# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-neuron batchnorm kernels.

Rows are neurons and columns are batch samples.  ``bn_forward`` centres each
row and divides by sqrt(mean squared deviation + eps); ``bn_vjp`` applies the
transposed Jacobian of that map to an upstream gradient.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def bn_forward(double[:, ::1] H, double eps=0.0):
    """Return (Y, inv_sigma) with Y[a] = (H[a] - mean) * inv_sigma[a]."""
    cdef Py_ssize_t n = H.shape[0], b = H.shape[1], a, i
    cdef double mu, ss, inv
    Y_arr = np.empty((n, b), dtype=np.float64)
    s_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] Y = Y_arr
    cdef double[::1] S = s_arr
    with nogil:
        for a in range(n):
            mu = 0.0
            for i in range(b):
                mu += H[a, i]
            mu /= b
            ss = 0.0
            for i in range(b):
                Y[a, i] = H[a, i] - mu
                ss += Y[a, i] * Y[a, i]
            inv = 1.0 / sqrt(ss / b + eps)
            S[a] = inv
            for i in range(b):
                Y[a, i] *= inv
    return Y_arr, s_arr


def bn_vjp(double[:, ::1] Gt, double[:, ::1] Y, double[::1] inv_sigma):
    """Transposed Jacobian of the normalization applied row-wise.

    ``Gt`` is the upstream gradient already multiplied by phi'(Y).
    """
    cdef Py_ssize_t n = Y.shape[0], b = Y.shape[1], a, i
    cdef double mg, mgy
    D_arr = np.empty((n, b), dtype=np.float64)
    cdef double[:, ::1] D = D_arr
    with nogil:
        for a in range(n):
            mg = 0.0
            mgy = 0.0
            for i in range(b):
                mg += Gt[a, i]
                mgy += Gt[a, i] * Y[a, i]
            mg /= b
            mgy /= b
            for i in range(b):
                D[a, i] = inv_sigma[a] * (Gt[a, i] - mg - Y[a, i] * mgy)
    return D_arr
