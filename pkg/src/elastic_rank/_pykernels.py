"""Numpy fallback for the compiled kernels, with identical rounding.

Every output entry of :func:`matmul` is accumulated over the inner index in
ascending order, one rounded product and one rounded add at a time, exactly
like the compiled loop. BLAS is deliberately avoided since it reassociates.
"""
import numpy as np


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, kk = a.shape
    if b.shape[0] != kk:
        raise ValueError("inner dimensions differ")
    out = np.zeros((m, b.shape[1]), dtype=np.float64)
    tmp = np.empty_like(out)
    for k in range(kk):
        np.multiply(a[:, k, None], b[None, k, :], out=tmp)
        out += tmp
    return out


def ema_update(i_bar, u_bar, current, beta1, beta2, use_updated_mean):
    n = i_bar.shape[0]
    if u_bar.shape[0] != n or current.shape[0] != n:
        raise ValueError("length mismatch")
    prev = i_bar.copy()
    i_bar *= beta1
    i_bar += (1.0 - beta1) * current
    ref = i_bar if use_updated_mean else prev
    u_bar *= beta2
    u_bar += (1.0 - beta2) * np.abs(current - ref)
