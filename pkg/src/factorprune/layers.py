"""Gated layer parameterizations and their compaction to dense matrices.

Three prunable layer kinds:
  FactorizedLinear   W = P @ Q with a gate over rank-1 components
  ColumnGatedLinear  unfactorized W with a gate over input columns
                     (equivalent to FactorizedLinear with P=W, Q=I)
  AdaptiveEmbedding  per-frequency-cluster factorized embeddings, one
                     gate per cluster over the reduced dimensions

Compaction deletes dropped components and absorbs the kept mask values
into the left factor, leaving plain dense matrices.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import tensor as T
from .gates import HardConcreteGate, PlainMask
from .tensor import DimensionError, Tensor


def starting_rank(d1: int, d2: int) -> int:
    """Inner dimension at which the factorization costs no more than d1*d2."""
    if d1 < 1 or d2 < 1:
        raise ValueError("dimensions must be >= 1")
    return max(1, (d1 * d2) // (d1 + d2))


def _factor_init(d_out, d_in, rank, rng, dtype):
    # Var(P@Q) per entry is rank * var_p * var_q; match Var(W) = 1/d_in by
    # giving each factor std (d_in * rank) ** -0.25.
    std = (d_in * rank) ** -0.25
    P = rng.standard_normal((d_out, rank)) * std
    Q = rng.standard_normal((rank, d_in)) * std
    return P.astype(dtype), Q.astype(dtype)


def _make_gate(mode, block_sizes, gate_kwargs, rng):
    if mode is None or mode == "none":
        return None
    if mode == "hard_concrete":
        return HardConcreteGate(block_sizes=block_sizes, rng=rng, **gate_kwargs)
    if mode == "plain":
        return PlainMask(block_sizes=block_sizes)
    raise ValueError(f"unknown gate mode {mode!r}")


class _EmptyView:
    """All components pruned: output is bias only."""

    def __init__(self, layer):
        self.layer = layer
        self.active = 0

    def __call__(self, x):
        y = Tensor(np.zeros((x.shape[0], self.layer.d_out), dtype=x.data.dtype))
        if self.layer.bias is not None:
            y = T.add_bias(y, self.layer.bias)
        return y


class _FactorView:
    """Factor pair gathered once per batch; apply to any number of inputs."""

    def __init__(self, layer, Qa_t, Pa_t, z_a, active):
        self.layer = layer
        self.Qa_t = Qa_t
        self.Pa_t = Pa_t
        self.z_a = z_a
        self.active = active

    def __call__(self, x):
        h = T.matmul(x, self.Qa_t)
        if self.z_a is not None:
            h = T.scale_columns(h, self.z_a)
        y = T.matmul(h, self.Pa_t)
        if self.layer.bias is not None:
            y = T.add_bias(y, self.layer.bias)
        return y


class _ColumnView:
    def __init__(self, layer, Wa_t, z_a, idx, active):
        self.layer = layer
        self.Wa_t = Wa_t
        self.z_a = z_a
        self.idx = idx
        self.active = active

    def __call__(self, x):
        if self.idx is not None:
            x = T.take_cols(x, self.idx)
        if self.z_a is not None:
            x = T.scale_columns(x, self.z_a)
        y = T.matmul(x, self.Wa_t)
        if self.layer.bias is not None:
            y = T.add_bias(y, self.layer.bias)
        return y


class FactorizedLinear:
    """y = P diag(z) Q x (+ bias), pruning whole rank-1 components.

    The masked forward gathers only the active components, so the inner
    dimension of the matmuls it runs equals the number of nonzero gate
    values, not the full rank.
    """

    kind = "factorized"

    def __init__(self, d_out, d_in, rank=None, bias=True, gate="hard_concrete",
                 gate_kwargs=None, rng=None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng()
        dtype = dtype or T.default_dtype()
        if rank is None:
            rank = starting_rank(d_out, d_in)
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.d_out, self.d_in, self.rank = d_out, d_in, rank
        P, Q = _factor_init(d_out, d_in, rank, rng, dtype)
        self.P = Tensor(P, requires_grad=True, name="P", dtype=dtype)
        self.Q = Tensor(Q, requires_grad=True, name="Q", dtype=dtype)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True, name="bias") if bias else None
        block_sizes = np.full(rank, d_out + d_in, dtype=np.int64)
        self.gate = _make_gate(gate, block_sizes, gate_kwargs or {}, rng)
        self.last_active_count = None

    def prepare(self, mask: Tensor | None):
        """Gather the active rank-1 components once for a whole batch.

        The returned view runs matmuls whose inner dimension is the
        number of nonzero gate values, never the full rank.
        """
        if mask is None:
            view = _FactorView(self, T.transpose(self.Q), T.transpose(self.P),
                               None, self.rank)
        else:
            idx = np.flatnonzero(mask.data)
            if idx.size == 0:
                view = _EmptyView(self)
            else:
                view = _FactorView(
                    self,
                    T.transpose(T.take_rows(self.Q, idx)),
                    T.transpose(T.take_cols(self.P, idx)),
                    T.take_rows(mask, idx),
                    int(idx.size),
                )
        self.last_active_count = view.active
        return view

    # mask: None for the ungated full product; a Tensor z of length rank
    # (sampled or deterministic) for the gated product.
    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"input {x.shape} does not match d_in={self.d_in}")
        return self.prepare(mask)(x)

    def forward_dense_mask(self, x: Tensor, mask: Tensor) -> Tensor:
        """Full-rank gated product; the active-subset path must match it."""
        h = T.scale_columns(T.matmul(x, T.transpose(self.Q)), mask)
        y = T.matmul(h, T.transpose(self.P))
        if self.bias is not None:
            y = T.add_bias(y, self.bias)
        return y

    def parameters(self):
        out = [("P", self.P), ("Q", self.Q)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        if isinstance(self.gate, HardConcreteGate):
            out.append(("alpha", self.gate.alpha))
        elif isinstance(self.gate, PlainMask):
            out.append(("mask", self.gate.g))
        return out

    def weight_count(self):
        n = self.P.size + self.Q.size
        return n + (self.bias.size if self.bias is not None else 0)

    def prunable_count(self):
        return int(self.gate.block_sizes.sum()) if self.gate is not None else 0

    def kept_counts(self):
        """(expected, actual) surviving prunable parameters."""
        if self.gate is None:
            return 0.0, 0
        kept, _ = self.gate.inference_mask()
        return self.gate.expected_l0_value(), int(self.gate.block_sizes[kept].sum())


class ColumnGatedLinear:
    """y = W diag(z) x (+ bias): input-feature pruning, no factorization."""

    kind = "column_gated"

    def __init__(self, d_out, d_in, bias=True, gate="hard_concrete",
                 gate_kwargs=None, rng=None, dtype=None, block_size=None):
        rng = rng if rng is not None else np.random.default_rng()
        dtype = dtype or T.default_dtype()
        self.d_out, self.d_in = d_out, d_in
        W = (rng.standard_normal((d_out, d_in)) * (d_in ** -0.5)).astype(dtype)
        self.W = Tensor(W, requires_grad=True, name="W", dtype=dtype)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True, name="bias") if bias else None
        block_sizes = np.full(d_in, block_size if block_size else d_out, dtype=np.int64)
        self.gate = _make_gate(gate, block_sizes, gate_kwargs or {}, rng)
        self.last_active_count = None

    def prepare(self, mask: Tensor | None):
        if mask is None:
            view = _ColumnView(self, T.transpose(self.W), None, None, self.d_in)
        else:
            idx = np.flatnonzero(mask.data)
            if idx.size == 0:
                view = _EmptyView(self)
            else:
                view = _ColumnView(self, T.transpose(T.take_cols(self.W, idx)),
                                   T.take_rows(mask, idx), idx, int(idx.size))
        self.last_active_count = view.active
        return view

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"input {x.shape} does not match d_in={self.d_in}")
        return self.prepare(mask)(x)

    def forward_dense_mask(self, x: Tensor, mask: Tensor) -> Tensor:
        y = T.matmul(T.scale_columns(x, mask), T.transpose(self.W))
        if self.bias is not None:
            y = T.add_bias(y, self.bias)
        return y

    def as_factorized(self) -> FactorizedLinear:
        """The P=W, Q=I construction this layer is a special case of."""
        lay = FactorizedLinear(self.d_out, self.d_in, rank=self.d_in,
                               bias=self.bias is not None, gate=None)
        lay.P = self.W
        lay.Q = Tensor(np.eye(self.d_in, dtype=self.W.data.dtype), name="Q")
        if self.bias is not None:
            lay.bias = self.bias
        lay.gate = self.gate
        return lay

    def parameters(self):
        out = [("W", self.W)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        if isinstance(self.gate, HardConcreteGate):
            out.append(("alpha", self.gate.alpha))
        elif isinstance(self.gate, PlainMask):
            out.append(("mask", self.gate.g))
        return out

    def weight_count(self):
        return self.W.size + (self.bias.size if self.bias is not None else 0)

    def prunable_count(self):
        return int(self.gate.block_sizes.sum()) if self.gate is not None else 0

    def kept_counts(self):
        if self.gate is None:
            return 0.0, 0
        kept, _ = self.gate.inference_mask()
        return self.gate.expected_l0_value(), int(self.gate.block_sizes[kept].sum())


class CompactedLinear:
    """Dense remainder of a pruned factorized layer."""

    kind = "compacted"

    def __init__(self, P, Q, bias=None):
        self.P = P if isinstance(P, Tensor) else Tensor(P)
        self.Q = Q if isinstance(Q, Tensor) else Tensor(Q)
        self.bias = bias if (bias is None or isinstance(bias, Tensor)) else Tensor(bias)
        self.d_out = self.P.shape[0]
        self.d_in = self.Q.shape[1]
        self.kept = self.P.shape[1]

    def prepare(self, mask=None):
        if self.kept == 0:
            return _EmptyView(self)
        return _FactorView(self, T.transpose(self.Q), T.transpose(self.P),
                           None, self.kept)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        return self.prepare()(x)

    def parameters(self):
        out = [("P", self.P), ("Q", self.Q)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def weight_count(self):
        n = self.P.size + self.Q.size
        return n + (self.bias.size if self.bias is not None else 0)


class CompactedColumnLinear:
    """Dense remainder of a pruned column-gated layer; gathers kept inputs."""

    kind = "compacted_columns"

    def __init__(self, W, kept_idx, bias=None):
        self.W = W if isinstance(W, Tensor) else Tensor(W)
        self.kept_idx = np.asarray(kept_idx, dtype=np.intp)
        self.bias = bias if (bias is None or isinstance(bias, Tensor)) else Tensor(bias)
        self.d_out = self.W.shape[0]
        self.kept = self.W.shape[1]

    def prepare(self, mask=None):
        if self.kept == 0:
            return _EmptyView(self)
        return _ColumnView(self, T.transpose(self.W), None, self.kept_idx, self.kept)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        return self.prepare()(x)

    def parameters(self):
        out = [("W", self.W)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def weight_count(self):
        return self.W.size + (self.bias.size if self.bias is not None else 0)


class Embedding:
    """Plain lookup table, optionally weight-tied to the output layer."""

    kind = "embedding"

    def __init__(self, n_tokens, dim, rng=None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng()
        dtype = dtype or T.default_dtype()
        self.n_tokens, self.dim = n_tokens, dim
        E = (rng.standard_normal((n_tokens, dim)) * (dim ** -0.5)).astype(dtype)
        self.E = Tensor(E, requires_grad=True, name="E", dtype=dtype)

    def lookup(self, ids, masks=None) -> Tensor:
        ids = np.asarray(ids)
        if ids.min(initial=0) < 0 or (ids.size and ids.max() >= self.n_tokens):
            raise IndexError("token id out of range")
        return T.take_rows(self.E, ids.reshape(-1))

    def parameters(self):
        return [("E", self.E)]

    def weight_count(self):
        return self.E.size

    def prunable_count(self):
        return 0


class AdaptiveEmbedding:
    """Frequency-clustered embedding with a gated reduced dimension per cluster.

    Cluster i covers the contiguous id range [lo_i, hi_i) of a vocabulary
    ordered by descending frequency; its table E_i has n_i x d_i entries
    projected back to the shared dimension d by O_i, with a gate over the
    d_i reduced dimensions.
    """

    kind = "adaptive_embedding"

    def __init__(self, boundaries, dims, dim, gate="hard_concrete",
                 gate_kwargs=None, rng=None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng()
        dtype = dtype or T.default_dtype()
        if len(boundaries) != len(dims):
            raise ValueError("one reduced dimension per cluster required")
        self.dim = dim
        self.boundaries = [(int(lo), int(hi)) for lo, hi in boundaries]
        for (lo, hi) in self.boundaries:
            if hi <= lo:
                raise ValueError("empty cluster")
        self.n_tokens = self.boundaries[-1][1]
        self.clusters = []
        for (lo, hi), d_i in zip(self.boundaries, dims):
            n_i = hi - lo
            # E_i: n_i x d_i, O_i: d_i x d
            E, O = _factor_init(n_i, dim, d_i, rng, dtype)
            E_t = Tensor(E, requires_grad=True, name="E", dtype=dtype)
            O_t = Tensor(O, requires_grad=True, name="O", dtype=dtype)
            block_sizes = np.full(d_i, n_i + dim, dtype=np.int64)
            g = _make_gate(gate, block_sizes, gate_kwargs or {}, rng)
            self.clusters.append({"E": E_t, "O": O_t, "gate": g, "lo": lo, "hi": hi, "d_i": d_i})

    def cluster_of(self, token_id):
        for i, (lo, hi) in enumerate(self.boundaries):
            if lo <= token_id < hi:
                return i
        raise IndexError(f"token id {token_id} out of range")

    def lookup(self, ids, masks=None) -> Tensor:
        """Embed ids; masks is an optional list of per-cluster gate tensors."""
        ids = np.asarray(ids).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_tokens):
            raise IndexError("token id out of range")
        n = ids.shape[0]
        out = None
        for i, c in enumerate(self.clusters):
            sel = np.flatnonzero((ids >= c["lo"]) & (ids < c["hi"]))
            if sel.size == 0:
                continue
            rows = T.take_rows(c["E"], ids[sel] - c["lo"])
            z = masks[i] if masks is not None else None
            if z is not None:
                rows = T.scale_columns(rows, z)
            part = T.scatter_rows(T.matmul(rows, c["O"]), sel, n)
            out = part if out is None else T.add(out, part)
        if out is None:
            out = Tensor(np.zeros((n, self.dim), dtype=T.default_dtype()))
        return out

    def gates(self):
        return [c["gate"] for c in self.clusters if c["gate"] is not None]

    def parameters(self):
        out = []
        for i, c in enumerate(self.clusters):
            out.append((f"E{i}", c["E"]))
            out.append((f"O{i}", c["O"]))
            if isinstance(c["gate"], HardConcreteGate):
                out.append((f"alpha{i}", c["gate"].alpha))
            elif isinstance(c["gate"], PlainMask):
                out.append((f"mask{i}", c["gate"].g))
        return out

    def weight_count(self):
        return sum(c["E"].size + c["O"].size for c in self.clusters)

    def prunable_count(self):
        return sum(int(c["gate"].block_sizes.sum()) for c in self.clusters if c["gate"] is not None)

    def kept_counts(self):
        exp, act = 0.0, 0
        for c in self.clusters:
            g = c["gate"]
            if g is None:
                continue
            kept, _ = g.inference_mask()
            exp += g.expected_l0_value()
            act += int(g.block_sizes[kept].sum())
        return exp, act


class CompactedEmbedding:
    kind = "compacted_embedding"

    def __init__(self, boundaries, dim, tables):
        # tables: list of (E', O') Tensors per cluster
        self.boundaries = [(int(lo), int(hi)) for lo, hi in boundaries]
        self.dim = dim
        self.n_tokens = self.boundaries[-1][1]
        self.tables = [(E if isinstance(E, Tensor) else Tensor(E),
                        O if isinstance(O, Tensor) else Tensor(O)) for E, O in tables]

    def lookup(self, ids, masks=None) -> Tensor:
        ids = np.asarray(ids).reshape(-1)
        n = ids.shape[0]
        out = None
        for (lo, hi), (E, O) in zip(self.boundaries, self.tables):
            sel = np.flatnonzero((ids >= lo) & (ids < hi))
            if sel.size == 0:
                continue
            if E.shape[1] == 0:
                continue
            rows = T.take_rows(E, ids[sel] - lo)
            part = T.scatter_rows(T.matmul(rows, O), sel, n)
            out = part if out is None else T.add(out, part)
        if out is None:
            out = Tensor(np.zeros((n, self.dim), dtype=T.default_dtype()))
        return out

    def parameters(self):
        out = []
        for i, (E, O) in enumerate(self.tables):
            out.append((f"E{i}", E))
            out.append((f"O{i}", O))
        return out

    def weight_count(self):
        return sum(E.size + O.size for E, O in self.tables)


class Linear:
    """Plain dense layer for the output projection (not prunable here)."""

    kind = "linear"

    def __init__(self, d_out, d_in, bias=True, rng=None, dtype=None, zero_init=False):
        rng = rng if rng is not None else np.random.default_rng()
        dtype = dtype or T.default_dtype()
        self.d_out, self.d_in = d_out, d_in
        if zero_init:
            W = np.zeros((d_out, d_in), dtype=dtype)
        else:
            W = (rng.standard_normal((d_out, d_in)) * (d_in ** -0.5)).astype(dtype)
        self.W = Tensor(W, requires_grad=True, name="W", dtype=dtype)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True, name="bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.transpose(self.W))
        if self.bias is not None:
            y = T.add_bias(y, self.bias)
        return y

    def parameters(self):
        out = [("W", self.W)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def weight_count(self):
        return self.W.size + (self.bias.size if self.bias is not None else 0)


# ------------------------------------------------------------- compaction

def compact(layer):
    """Freeze the layer's deterministic mask into smaller dense matrices."""
    if isinstance(layer, FactorizedLinear):
        if layer.gate is None:
            return CompactedLinear(Tensor(layer.P.data.copy()), Tensor(layer.Q.data.copy()),
                                   None if layer.bias is None else Tensor(layer.bias.data.copy()))
        kept, values = layer.gate.inference_mask()
        if kept.size == 0:
            warnings.warn("all components pruned; layer degenerates to bias only")
        Pp = layer.P.data[:, kept] * values[kept]
        Qp = layer.Q.data[kept, :].copy()
        bias = None if layer.bias is None else Tensor(layer.bias.data.copy())
        return CompactedLinear(Tensor(Pp), Tensor(Qp), bias)
    if isinstance(layer, ColumnGatedLinear):
        kept, values = layer.gate.inference_mask()
        if kept.size == 0:
            warnings.warn("all columns pruned; layer degenerates to bias only")
        Wp = layer.W.data[:, kept] * values[kept]
        bias = None if layer.bias is None else Tensor(layer.bias.data.copy())
        return CompactedColumnLinear(Tensor(Wp), kept, bias)
    if isinstance(layer, AdaptiveEmbedding):
        tables = []
        for c in layer.clusters:
            if c["gate"] is None:
                tables.append((Tensor(c["E"].data.copy()), Tensor(c["O"].data.copy())))
                continue
            kept, values = c["gate"].inference_mask()
            if kept.size == 0:
                warnings.warn("embedding cluster fully pruned; rows become zero vectors")
            Ep = c["E"].data[:, kept] * values[kept]
            Op = c["O"].data[kept, :].copy()
            tables.append((Tensor(Ep), Tensor(Op)))
        return CompactedEmbedding(layer.boundaries, layer.dim, tables)
    raise TypeError(f"cannot compact {type(layer).__name__}")
