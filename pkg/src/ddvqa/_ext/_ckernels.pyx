# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels. Signatures mirror ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            y[i, j] = exp(x[i, j] - m)
            s += y[i, j]
        s = 1.0 / s
        for j in range(k):
            y[i, j] *= s
    return out


def softmax_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], k = y.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += gy[i, j] * y[i, j]
        for j in range(k):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def log_softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            s += exp(x[i, j] - m)
        s = m + log(s)
        for j in range(k):
            y[i, j] = x[i, j] - s
    return out


def log_softmax_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], k = y.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(k):
            s += gy[i, j]
        for j in range(k):
            gx[i, j] = gy[i, j] - exp(y[i, j]) * s
    return out


def layer_norm_forward(const double[:, ::1] x, const double[::1] gain,
                       const double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    xhat_arr = np.empty((n, k), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xh = xhat_arr
    cdef double[::1] rs = rstd_arr
    cdef double mu, var, d, r
    for i in range(n):
        mu = 0.0
        for j in range(k):
            mu += x[i, j]
        mu /= k
        var = 0.0
        for j in range(k):
            d = x[i, j] - mu
            var += d * d
        var /= k
        r = 1.0 / sqrt(var + eps)
        rs[i] = r
        for j in range(k):
            d = (x[i, j] - mu) * r
            xh[i, j] = d
            y[i, j] = d * gain[j] + bias[j]
    return out, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] gy, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t n = gy.shape[0], k = gy.shape[1], i, j
    gx_arr = np.empty((n, k), dtype=np.float64)
    gg_arr = np.zeros(k, dtype=np.float64)
    gb_arr = np.zeros(k, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double sg, sgx, g
    for i in range(n):
        sg = 0.0
        sgx = 0.0
        for j in range(k):
            gg[j] += gy[i, j] * xhat[i, j]
            gb[j] += gy[i, j]
            g = gy[i, j] * gain[j]
            sg += g
            sgx += g * xhat[i, j]
        sg /= k
        sgx /= k
        for j in range(k):
            g = gy[i, j] * gain[j]
            gx[i, j] = (g - sg - xhat[i, j] * sgx) * rstd[i]
    return gx_arr, gg_arr, gb_arr


def gelu_forward(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double v
    for i in range(n):
        for j in range(k):
            v = x[i, j]
            y[i, j] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out


def gelu_backward(const double[:, ::1] x, const double[:, ::1] gy):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef double v, t, du
    for i in range(n):
        for j in range(k):
            v = x[i, j]
            t = tanh(GELU_C * (v + GELU_A * v * v * v))
            du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            gx[i, j] = gy[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return out


def lcs_length(a, b):
    """Longest common subsequence length of two integer sequences."""
    cdef Py_ssize_t la = len(a), lb = len(b), i, j
    if la == 0 or lb == 0:
        return 0
    cdef cnp.int64_t[::1] av = np.asarray(a, dtype=np.int64)
    cdef cnp.int64_t[::1] bv = np.asarray(b, dtype=np.int64)
    prev_arr = np.zeros(lb + 1, dtype=np.int64)
    cur_arr = np.zeros(lb + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] prev = prev_arr
    cdef cnp.int64_t[::1] cur = cur_arr
    cdef cnp.int64_t[::1] tmp
    for i in range(la):
        cur[0] = 0
        for j in range(lb):
            if av[i] == bv[j]:
                cur[j + 1] = prev[j] + 1
            elif cur[j] > prev[j + 1]:
                cur[j + 1] = cur[j]
            else:
                cur[j + 1] = prev[j + 1]
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[lb])
