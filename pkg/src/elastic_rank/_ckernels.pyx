"""Compiled hot kernels. Must stay bitwise-equivalent to ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def matmul(const double[:, :] a, const double[:, :] b):
    """Fixed-order product: each output entry sums over k = 0..K-1 in order."""
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t kk = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    if b.shape[0] != kk:
        raise ValueError("inner dimensions differ")
    out_arr = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double aik
    with nogil:
        for i in range(m):
            for k in range(kk):
                aik = a[i, k]
                for j in range(n):
                    out[i, j] = out[i, j] + aik * b[k, j]
    return out_arr


def ema_update(double[::1] i_bar, double[::1] u_bar, const double[::1] current,
               double beta1, double beta2, bint use_updated_mean):
    """In-place sensitivity/uncertainty moving averages over flat arrays."""
    cdef Py_ssize_t n = i_bar.shape[0]
    if u_bar.shape[0] != n or current.shape[0] != n:
        raise ValueError("length mismatch")
    cdef double c1 = 1.0 - beta1
    cdef double c2 = 1.0 - beta2
    cdef double prev, new, ref
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            prev = i_bar[i]
            new = beta1 * prev + c1 * current[i]
            ref = new if use_updated_mean else prev
            i_bar[i] = new
            u_bar[i] = beta2 * u_bar[i] + c2 * fabs(current[i] - ref)
