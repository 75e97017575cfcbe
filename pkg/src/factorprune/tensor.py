"""Dense tensors with reverse-mode autodiff on an explicit tape.

Tensors hold 0-, 1- or 2-D numpy arrays, float64 by default with a
global float32 mode for speed runs. Ops record onto the active Graph
only while one is open and an input is on the grad path, so plain
evaluation costs nothing beyond numpy. Broadcasting is deliberately
narrow: scalars, equal shapes, and the two dedicated layer ops
(add_bias, scale_columns).
"""

from __future__ import annotations

import contextlib

import numpy as np

from .backend import kernels as K


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class DomainError(ValueError):
    """Input outside an op's mathematical domain."""


class GraphError(RuntimeError):
    """Tape misuse: backward twice, non-scalar loss, empty graph."""


_DTYPE = np.float64
_CHECK_FINITE = True
_GRAD_ENABLED = True
_ACTIVE: "Graph | None" = None


def set_default_dtype(name):
    """Select the global precision: "float64" (default) or "float32"."""
    global _DTYPE
    if name in ("float64", np.float64):
        _DTYPE = np.float64
    elif name in ("float32", np.float32):
        _DTYPE = np.float32
    else:
        raise ValueError(f"unsupported dtype {name!r}")


def default_dtype():
    return _DTYPE


def set_finite_checks(enabled: bool):
    """Toggle the NaN/Inf guard run after every forward op."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array plus its slot in the current graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_grad_owned")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DTYPE)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        """Leaf tensor sharing this data, cut from the graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def __repr__(self):
        tag = self.name or "tensor"
        return f"<{tag} shape={self.shape} grad={self.requires_grad}>"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Graph:
    """Append-only tape of recorded ops; context manager activates it."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise GraphError("a graph is already active; graphs do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def nodes(self):
        return self._nodes

    def record(self, out, parents, backward_fn, tag=None):
        self._nodes.append((out, parents, backward_fn, tag))

    def backward(self, loss: Tensor):
        """Populate grads of everything reachable from the scalar loss."""
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if not self._nodes:
            raise GraphError("graph is empty; nothing to differentiate")
        if self._consumed:
            raise GraphError("backward() already ran on this graph; build a new one")
        if not loss.requires_grad:
            raise GraphError("loss is not connected to this graph")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        loss._grad_owned = True
        for out, parents, backward_fn, _tag in reversed(self._nodes):
            if isinstance(out, tuple):
                gs = [o.grad for o in out]
                if all(g is None for g in gs):
                    continue
                grads = backward_fn(gs)
            else:
                g = out.grad
                if g is None:
                    continue
                grads = backward_fn(g)
            for parent, pg in zip(parents, grads):
                if pg is not None and parent.requires_grad:
                    parent._accumulate(pg)


def active_graph():
    return _ACTIVE


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _finite_guard(arr, op):
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


def _make(data, parents, backward_fn, tag):
    """Wrap op output; record on the tape when something upstream needs grads."""
    _finite_guard(data, tag)
    track = _GRAD_ENABLED and _ACTIVE is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        _ACTIVE.record(out, parents, backward_fn, tag)
    return out


# ---------------------------------------------------------------- matmul

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        da = g @ b.data.T if a.requires_grad else None
        db = a.data.T @ g if b.requires_grad else None
        return da, db

    return _make(out, (a, b), backward, "matmul")


def transpose(x):
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {x.shape}")
    return _make(x.data.T, (x,), lambda g: (g.T,), "transpose")


# ------------------------------------------------------------ elementwise

def _binary_shapes(a, b, op):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} (only scalar or equal-shape)")


def _reduce_to(g, t):
    # gradient for a scalar operand of a broadcast binary op
    if t.size == 1 and g.size != 1:
        return np.sum(g).reshape(t.shape)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a), _reduce_to(g, b)),
        "add",
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, a), _reduce_to(-g, b)),
        "sub",
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)),
        "mul",
    )


def neg(x):
    x = _as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c: float):
    """Multiply by a python constant (no gradient for c)."""
    x = _as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def sigmoid(x):
    x = _as_tensor(x)
    y = K.sigmoid(np.ravel(x.data)).reshape(x.shape)

    def backward(g):
        return (K.sigmoid_grad(np.ravel(g), np.ravel(y)).reshape(x.shape),)

    return _make(y, (x,), backward, "sigmoid")


def tanh(x):
    x = _as_tensor(x)
    y = K.tanh(np.ravel(x.data)).reshape(x.shape)

    def backward(g):
        return (K.tanh_grad(np.ravel(g), np.ravel(y)).reshape(x.shape),)

    return _make(y, (x,), backward, "tanh")


def log(x):
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: input must be strictly positive")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp(x, lo: float, hi: float):
    """Clip into [lo, hi]; gradient is zero outside and at the boundaries."""
    x = _as_tensor(x)
    xd = np.ravel(x.data)
    y = K.clamp(xd, float(lo), float(hi)).reshape(x.shape)

    def backward(g):
        return (K.clamp_grad(np.ravel(np.ascontiguousarray(g)), xd, float(lo), float(hi)).reshape(x.shape),)

    return _make(y, (x,), backward, "clamp")


def absval(x):
    x = _as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sum_all(x):
    """Sum of all entries as a 0-D tensor."""
    x = _as_tensor(x)
    out = np.asarray(np.sum(x.data))
    return _make(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy() if x.ndim else g,), "sum")


def mean_all(x):
    x = _as_tensor(x)
    return scale(sum_all(x), 1.0 / x.size)


# ------------------------------------------------- layer-shaped broadcasts

def add_bias(x, b):
    """x[m,n] + b[n] row-broadcast; the only row broadcast the models need."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} with bias {b.shape}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def scale_columns(x, v):
    """x[m,n] * v[n] columnwise; realizes diagonal gating of components."""
    x, v = _as_tensor(x), _as_tensor(v)
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"scale_columns: {x.shape} with vector {v.shape}")

    def backward(g):
        dx = g * v.data if x.requires_grad else None
        dv = np.einsum("ij,ij->j", g, x.data) if v.requires_grad else None
        return dx, dv

    return _make(x.data * v.data, (x, v), backward, "scale_columns")


# ------------------------------------------------------- gather / scatter

def take_rows(x, idx):
    """Gather rows (2-D) or entries (1-D) by integer index; repeats allowed."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _make(x.data[idx], (x,), backward, "take_rows")


def take_cols(x, idx):
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"take_cols needs 2-D, got {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), idx), g)
        return (dx,)

    return _make(x.data[:, idx], (x,), backward, "take_cols")


def scatter_rows(rows, idx, n_total: int):
    """Place rows at positions idx of an otherwise-zero [n_total, d] tensor."""
    rows = _as_tensor(rows)
    if rows.ndim != 2:
        raise DimensionError(f"scatter_rows needs 2-D rows, got {rows.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[0] != rows.shape[0]:
        raise DimensionError("scatter_rows: one index per row required")
    out = np.zeros((n_total, rows.shape[1]), dtype=rows.data.dtype)
    np.add.at(out, idx, rows.data)
    return _make(out, (rows,), lambda g: (g[idx],), "scatter_rows")


def split_rows(x, n_chunks: int):
    """Split [n_chunks*B, d] into n_chunks row blocks as one tape node.

    The backward pass reassembles the block gradients with a single
    concatenate, so per-chunk consumers cost O(B*d), not O(n*B*d).
    """
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] % n_chunks:
        raise DimensionError(f"split_rows: cannot split {x.shape} into {n_chunks}")
    rows = x.shape[0] // n_chunks
    # views of x; x was finite-checked when it was produced
    datas = [x.data[i * rows:(i + 1) * rows] for i in range(n_chunks)]
    track = _GRAD_ENABLED and _ACTIVE is not None and x.requires_grad
    outs = tuple(Tensor(d, requires_grad=track, dtype=d.dtype) for d in datas)
    if track:
        def backward(gs):
            shape = (rows, x.shape[1])
            parts = [g if g is not None else np.zeros(shape, dtype=x.data.dtype)
                     for g in gs]
            return (np.concatenate(parts, axis=0),)

        _ACTIVE.record(outs, (x,), backward, "split_rows")
    return list(outs)


def concat_rows(parts):
    """Stack 2-D tensors along axis 0."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_rows: empty list")
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(out, tuple(parts), backward, "concat_rows")


# ----------------------------------------------------------- fused gates

def hard_concrete_sample(alpha, u, l: float, r: float, beta: float):
    """Sampled gate values z in [0,1], differentiable w.r.t. alpha.

    u must already be clamped strictly inside (0, 1); the gate object
    owns that clamping.
    """
    alpha = _as_tensor(alpha)
    u = np.ascontiguousarray(u, dtype=alpha.data.dtype)
    if alpha.ndim != 1 or u.shape != alpha.shape:
        raise DimensionError(f"hard_concrete_sample: alpha {alpha.shape} vs u {u.shape}")
    z, s = K.hc_sample(np.ascontiguousarray(alpha.data), u, float(l), float(r), float(beta))

    def backward(g):
        return (K.hc_sample_grad(np.ascontiguousarray(g), s, float(l), float(r), float(beta)),)

    return _make(z, (alpha,), backward, "hard_concrete_sample")


# ------------------------------------------------------------------ loss

def cross_entropy_logits(logits, targets):
    """Mean negative log-likelihood in nats over rows of logits."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n = logits.shape[0]
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    nll = (np.log(denom[:, 0]) + m[:, 0]) - z[np.arange(n), targets]
    out = np.asarray(nll.mean())

    def backward(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        d *= float(g) / n
        return (d,)

    return _make(out, (logits,), backward, "cross_entropy")
