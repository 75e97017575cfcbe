"""Numpy fallback for the compiled kernels in _fastops.pyx.

Same signatures, same semantics; used when the extension is not built or
when FACTORPRUNE_PURE_PYTHON is set.
"""

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_grad(g, y):
    return g * y * (1.0 - y)


def tanh(x):
    return np.tanh(x)


def tanh_grad(g, y):
    return g * (1.0 - y * y)


def clamp(x, lo, hi):
    return np.clip(x, lo, hi)


def clamp_grad(g, x, lo, hi):
    return np.where((x > lo) & (x < hi), g, 0.0).astype(g.dtype, copy=False)


def hc_sample(alpha, u, l, r, beta):
    s = sigmoid((np.log(u) - np.log(1.0 - u) + alpha) / beta)
    z = np.clip(s * (r - l) + l, 0.0, 1.0)
    return z.astype(alpha.dtype, copy=False), s.astype(alpha.dtype, copy=False)


def hc_sample_grad(g, s, l, r, beta):
    sbar = s * (r - l) + l
    inside = (sbar > 0.0) & (sbar < 1.0)
    d = g * ((r - l) / beta) * s * (1.0 - s)
    return np.where(inside, d, 0.0).astype(g.dtype, copy=False)


def sgd_momentum(param, grad, buf, lr, momentum):
    buf *= momentum
    buf += grad
    param -= lr * buf
