# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused elementwise kernels for the tape engine's hot ops.

Every function works on flat C-contiguous arrays (float32 or float64)
and mirrors one function in _slowops; factorprune.backend picks whichever
import succeeds. Fusion avoids the temporary arrays numpy needs for
chained expressions, which is where the time goes at small batch sizes.
"""

import numpy as np

from libc.math cimport exp, log, tanh as ctanh

ctypedef fused real:
    float
    double


cdef inline object _empty_like(real[::1] x):
    if real is double:
        return np.empty(x.shape[0], dtype=np.float64)
    return np.empty(x.shape[0], dtype=np.float32)


def sigmoid(real[::1] x):
    out_arr = _empty_like(x)
    cdef real[::1] out = out_arr
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        out[i] = 1.0 / (1.0 + exp(-x[i]))
    return out_arr


def sigmoid_grad(real[::1] g, real[::1] y):
    """dx for y = sigmoid(x): g * y * (1 - y)."""
    out_arr = _empty_like(g)
    cdef real[::1] out = out_arr
    cdef Py_ssize_t i, n = g.shape[0]
    for i in range(n):
        out[i] = g[i] * y[i] * (1.0 - y[i])
    return out_arr


def tanh(real[::1] x):
    out_arr = _empty_like(x)
    cdef real[::1] out = out_arr
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        out[i] = ctanh(x[i])
    return out_arr


def tanh_grad(real[::1] g, real[::1] y):
    """dx for y = tanh(x): g * (1 - y^2)."""
    out_arr = _empty_like(g)
    cdef real[::1] out = out_arr
    cdef Py_ssize_t i, n = g.shape[0]
    for i in range(n):
        out[i] = g[i] * (1.0 - y[i] * y[i])
    return out_arr


def clamp(real[::1] x, double lo, double hi):
    out_arr = _empty_like(x)
    cdef real[::1] out = out_arr
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real v
    for i in range(n):
        v = x[i]
        if v < lo:
            v = <real> lo
        elif v > hi:
            v = <real> hi
        out[i] = v
    return out_arr


def clamp_grad(real[::1] g, real[::1] x, double lo, double hi):
    """Unit gradient strictly inside (lo, hi), zero outside and at the ends."""
    out_arr = _empty_like(g)
    cdef real[::1] out = out_arr
    cdef Py_ssize_t i, n = g.shape[0]
    for i in range(n):
        out[i] = g[i] if (x[i] > lo and x[i] < hi) else 0.0
    return out_arr


def hc_sample(real[::1] alpha, real[::1] u, double l, double r, double beta):
    """Stretched-and-rectified logistic gate sample.

    s = sigmoid((log u - log(1-u) + alpha) / beta); z = clip(s*(r-l)+l, 0, 1).
    Returns (z, s); s is what the backward pass needs.
    """
    z_arr = _empty_like(alpha)
    s_arr = _empty_like(alpha)
    cdef real[::1] z = z_arr
    cdef real[::1] s = s_arr
    cdef Py_ssize_t i, n = alpha.shape[0]
    cdef double si, sbar
    for i in range(n):
        si = 1.0 / (1.0 + exp(-(log(u[i]) - log(1.0 - u[i]) + alpha[i]) / beta))
        s[i] = <real> si
        sbar = si * (r - l) + l
        if sbar < 0.0:
            sbar = 0.0
        elif sbar > 1.0:
            sbar = 1.0
        z[i] = <real> sbar
    return z_arr, s_arr


def hc_sample_grad(real[::1] g, real[::1] s, double l, double r, double beta):
    """dalpha for hc_sample; zero where the rectifier clipped."""
    out_arr = _empty_like(g)
    cdef real[::1] out = out_arr
    cdef Py_ssize_t i, n = g.shape[0]
    cdef double si, sbar
    for i in range(n):
        si = s[i]
        sbar = si * (r - l) + l
        if sbar > 0.0 and sbar < 1.0:
            out[i] = <real> (g[i] * (r - l) / beta * si * (1.0 - si))
        else:
            out[i] = 0.0
    return out_arr


def sgd_momentum(real[::1] param, real[::1] grad, real[::1] buf,
                 double lr, double momentum):
    """In-place heavy-ball update: buf = momentum*buf + grad; param -= lr*buf."""
    cdef Py_ssize_t i, n = param.shape[0]
    for i in range(n):
        buf[i] = <real> (momentum * buf[i] + grad[i])
        param[i] = <real> (param[i] - lr * buf[i])
