"""Parameter updates: momentum SGD and Adam, plus LR schedules.

A schedule is any callable step -> learning rate. Parameters may carry a
per-tensor LR scale (pass (tensor, scale) pairs) so gate logits can move
faster or slower than the weights they control.
"""

from __future__ import annotations

import math

import numpy as np

from .backend import kernels as K
from .tensor import Tensor


class InverseSqrtSchedule:
    """Linear warmup to base_lr, then decay proportional to 1/sqrt(step)."""

    def __init__(self, base_lr: float, warmup_steps: int = 400):
        if warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        self.base_lr = float(base_lr)
        self.warmup_steps = int(warmup_steps)

    def __call__(self, step: int) -> float:
        t = max(step, 0) + 1
        w = self.warmup_steps
        return self.base_lr * min(t / w, math.sqrt(w / t))


class ConstantSchedule:
    def __init__(self, lr: float):
        self.lr = float(lr)

    def __call__(self, step: int) -> float:
        return self.lr


def _normalize(params, default_momentum=None):
    """Accept tensors, (tensor, lr_scale) or (tensor, lr_scale, momentum)."""
    out = []
    for p in params:
        if isinstance(p, Tensor):
            out.append((p, 1.0, default_momentum))
        elif len(p) == 2:
            out.append((p[0], float(p[1]), default_momentum))
        else:
            t, s, m = p
            out.append((t, float(s), None if m is None else float(m)))
    return out


class SGD:
    """Heavy-ball SGD; the per-parameter buffer is the momentum state."""

    def __init__(self, params, lr=0.1, momentum=0.9, schedule=None):
        self.momentum = float(momentum)
        self.params = _normalize(params)
        self.schedule = schedule if schedule is not None else ConstantSchedule(lr)
        self.step_count = 0
        self.buffers = [np.zeros_like(t.data) for t, _, _ in self.params]

    def step(self):
        lr = self.schedule(self.step_count)
        for (t, lr_scale, mom), buf in zip(self.params, self.buffers):
            if t.grad is None:
                continue
            g = np.ascontiguousarray(t.grad, dtype=t.data.dtype)
            K.sgd_momentum(t.data.reshape(-1), g.reshape(-1), buf.reshape(-1),
                           lr * lr_scale, self.momentum if mom is None else mom)
        self.step_count += 1

    def zero_grad(self):
        for t, _, _ in self.params:
            t.zero_grad()

    def current_lr(self):
        return self.schedule(self.step_count)

    def state_arrays(self):
        return list(self.buffers)

    def load_state_arrays(self, arrays, step_count):
        if len(arrays) != len(self.buffers):
            raise ValueError("optimizer state length mismatch")
        for buf, arr in zip(self.buffers, arrays):
            buf[...] = arr.reshape(buf.shape)
        self.step_count = int(step_count)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, schedule=None):
        self.params = _normalize(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.schedule = schedule if schedule is not None else ConstantSchedule(lr)
        self.step_count = 0
        self.m = [np.zeros_like(t.data) for t, _, _ in self.params]
        self.v = [np.zeros_like(t.data) for t, _, _ in self.params]

    def step(self):
        self.step_count += 1
        lr = self.schedule(self.step_count - 1)
        bc1 = 1.0 - self.b1 ** self.step_count
        bc2 = 1.0 - self.b2 ** self.step_count
        for (t, lr_scale, _), m, v in zip(self.params, self.m, self.v):
            if t.grad is None:
                continue
            g = t.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            t.data -= (lr * lr_scale) * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for t, _, _ in self.params:
            t.zero_grad()

    def current_lr(self):
        return self.schedule(self.step_count)

    def state_arrays(self):
        return list(self.m) + list(self.v)

    def load_state_arrays(self, arrays, step_count):
        n = len(self.m)
        if len(arrays) != 2 * n:
            raise ValueError("optimizer state length mismatch")
        for buf, arr in zip(self.m + self.v, arrays):
            buf[...] = arr.reshape(buf.shape)
        self.step_count = int(step_count)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale all grads so their joint L2 norm is at most max_norm."""
    tensors = [p if isinstance(p, Tensor) else p[0] for p in params]
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm
