# cython: language_level=3
"""Compiled hot kernels.

Every product accumulates over the inner index in ascending order starting
from 0.0, one rounded multiply and one rounded add per term.  The pure-Python
twin in ``_pykernels`` follows the same order, so both backends agree bitwise.
All loops run without the GIL so worker threads overlap.
"""
import numpy as np
from libc.math cimport tanh


def matmul(const double[:, :] a, const double[:, :] b):
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double aik
    if b.shape[0] != kk:
        raise ValueError(f"matmul: inner dimensions differ ({kk} vs {b.shape[0]})")
    out_arr = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(m):
            for k in range(kk):
                aik = a[i, k]
                for j in range(n):
                    out[i, j] = out[i, j] + aik * b[k, j]
    return out_arr


def bmm(const double[:, :, :] a, const double[:, :, :] b):
    cdef Py_ssize_t bs = a.shape[0], m = a.shape[1], kk = a.shape[2], n = b.shape[2]
    cdef Py_ssize_t p, i, j, k
    cdef double aik
    if b.shape[0] != bs or b.shape[1] != kk:
        raise ValueError("bmm: incompatible shapes")
    out_arr = np.zeros((bs, m, n), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for p in range(bs):
            for i in range(m):
                for k in range(kk):
                    aik = a[p, i, k]
                    for j in range(n):
                        out[p, i, j] = out[p, i, j] + aik * b[p, k, j]
    return out_arr


def scalar_block_step(const double[::1] z, double a, double b, double h):
    """One step of the elementwise block z + h*tanh(a*z + b)."""
    cdef Py_ssize_t i, n = z.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            out[i] = z[i] + h * tanh(a * z[i] + b)
    return out_arr
