"""A small recurrent character LM assembled from gated layers.

Each layer is an Elman-style cell h_t = tanh(Wx x_t + Wh h_{t-1} + b)
whose input and hidden projections are prunable (factorized + gated,
column-gated, or fixed small factors depending on the method). The
output projection is a plain dense layer, zero-initialized so a fresh
model predicts the uniform distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .gates import HardConcreteGate, PlainMask
from .layers import (
    AdaptiveEmbedding,
    ColumnGatedLinear,
    Embedding,
    FactorizedLinear,
    Linear,
    compact,
    starting_rank,
)
from .tensor import Tensor

METHODS = ("flop-l0", "flop-agp", "np-l0", "fac")


@dataclass
class ModelSpec:
    vocab_size: int
    dim: int = 256
    hidden: int = 256
    layers: int = 2
    rank: int | None = None          # None: parity rule d1*d2/(d1+d2)
    method: str = "flop-l0"
    adaptive: bool = False
    cluster_boundaries: list | None = None
    cluster_dims: list | None = None
    tie_weights: bool = False
    fac_keep_fraction: float = 1.0   # FAC baseline: fixed rank fraction
    gate_kwargs: dict | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.tie_weights and (self.adaptive or self.dim != self.hidden):
            raise ValueError("tied weights need a plain embedding with dim == hidden")


def _cell_projection(spec: ModelSpec, d_out, d_in, rng):
    gk = spec.gate_kwargs or {}
    if spec.method == "fac":
        r = spec.rank if spec.rank is not None else starting_rank(d_out, d_in)
        r = max(1, round(r * spec.fac_keep_fraction))
        return FactorizedLinear(d_out, d_in, rank=r, bias=False, gate=None, rng=rng)
    if spec.method == "np-l0":
        return ColumnGatedLinear(d_out, d_in, bias=False, gate="hard_concrete",
                                 gate_kwargs=gk, rng=rng)
    gate = "plain" if spec.method == "flop-agp" else "hard_concrete"
    return FactorizedLinear(d_out, d_in, rank=spec.rank, bias=False, gate=gate,
                            gate_kwargs=gk if gate == "hard_concrete" else None, rng=rng)


class RecurrentCell:
    def __init__(self, spec: ModelSpec, d_in, d_hidden, rng):
        self.wx = _cell_projection(spec, d_hidden, d_in, rng)
        self.wh = _cell_projection(spec, d_hidden, d_hidden, rng)
        self.b = Tensor(np.zeros(d_hidden, dtype=T.default_dtype()), requires_grad=True, name="b")


def _run_stack(model, ids, hidden, masks):
    """Unrolled forward shared by the gated and compacted models.

    ids[batch, steps] flattens time-major (row t*B + b); every input
    projection runs as one matmul over the whole window, only the
    hidden-to-hidden recursion is sequential. Gated layers gather their
    active components once per batch via prepare().
    """
    ids = np.asarray(ids)
    B, S = ids.shape
    if hidden is None:
        hidden = model.init_hidden(B)
    flat = ids.T.reshape(-1)
    emb_masks = model._embedding_masks(masks) if masks is not None else None
    seq = model.embedding.lookup(flat, emb_masks)
    new_hidden = []
    for i, cell in enumerate(model.cells):
        wx_view = cell.wx.prepare(None if masks is None else masks.get(f"cell{i}.wx"))
        wh_view = cell.wh.prepare(None if masks is None else masks.get(f"cell{i}.wh"))
        chunks = T.split_rows(wx_view(seq), S)
        h = hidden[i]
        outs = []
        for t in range(S):
            pre = T.add(chunks[t], wh_view(h))
            h = T.tanh(T.add_bias(pre, cell.b))
            outs.append(h)
        seq = T.concat_rows(outs)
        new_hidden.append(h.detach())
    if model.tie_weights:
        logits = T.matmul(seq, T.transpose(model.embedding.E))
        if model.out.bias is not None:
            logits = T.add_bias(logits, model.out.bias)
    else:
        logits = model.out.forward(seq)
    return logits, new_hidden


class RecurrentLM:
    def __init__(self, spec: ModelSpec, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        self.spec = spec
        gk = spec.gate_kwargs or {}
        if spec.adaptive:
            if not spec.cluster_boundaries or not spec.cluster_dims:
                raise ValueError("adaptive embedding needs boundaries and dims")
            gate = "plain" if spec.method == "flop-agp" else (
                None if spec.method == "fac" else "hard_concrete")
            self.embedding = AdaptiveEmbedding(
                spec.cluster_boundaries, spec.cluster_dims, spec.dim,
                gate=gate, gate_kwargs=gk if gate == "hard_concrete" else None, rng=rng)
        else:
            self.embedding = Embedding(spec.vocab_size, spec.dim, rng=rng)
        self.cells = [
            RecurrentCell(spec, spec.dim if i == 0 else spec.hidden, spec.hidden, rng)
            for i in range(spec.layers)
        ]
        self.out = Linear(spec.vocab_size, spec.hidden, rng=rng, zero_init=True)
        self.tie_weights = spec.tie_weights

    # ------------------------------------------------------------- plumbing

    def gated_layers(self):
        """(name, layer) pairs that carry gates, embedding included."""
        out = []
        if isinstance(self.embedding, AdaptiveEmbedding):
            out.append(("embedding", self.embedding))
        for i, cell in enumerate(self.cells):
            out.append((f"cell{i}.wx", cell.wx))
            out.append((f"cell{i}.wh", cell.wh))
        return out

    def gates(self):
        """(name, gate) for every stochastic or plain mask in the model."""
        out = []
        for name, layer in self.gated_layers():
            if isinstance(layer, AdaptiveEmbedding):
                for i, c in enumerate(layer.clusters):
                    if c["gate"] is not None:
                        out.append((f"{name}.cluster{i}", c["gate"]))
            elif layer.gate is not None:
                out.append((name, layer.gate))
        return out

    def parameters(self):
        out = []
        for pname, p in self.embedding.parameters():
            out.append((f"embedding.{pname}", p))
        for i, cell in enumerate(self.cells):
            for pname, p in cell.wx.parameters():
                out.append((f"cell{i}.wx.{pname}", p))
            for pname, p in cell.wh.parameters():
                out.append((f"cell{i}.wh.{pname}", p))
            out.append((f"cell{i}.b", cell.b))
        if not self.tie_weights:
            out.append(("out.W", self.out.W))
        if self.out.bias is not None:
            out.append(("out.bias", self.out.bias))
        return out

    # ------------------------------------------------------------- masking

    def sample_masks(self, rng):
        """One shared mask per gate for the whole batch; keys match gates()."""
        masks = {}
        for name, gate in self.gates():
            if isinstance(gate, HardConcreteGate):
                u = rng.uniform(0.0, 1.0, gate.n)
                masks[name] = gate.sample_mask(u)
            elif isinstance(gate, PlainMask):
                masks[name] = gate.mask_tensor()
        return masks

    def deterministic_masks(self):
        masks = {}
        for name, gate in self.gates():
            _, values = gate.inference_mask()
            masks[name] = Tensor(values)
        return masks

    def _embedding_masks(self, masks):
        if not isinstance(self.embedding, AdaptiveEmbedding) or masks is None:
            return None
        out = []
        for i, c in enumerate(self.embedding.clusters):
            out.append(masks.get(f"embedding.cluster{i}") if c["gate"] is not None else None)
        return out

    # -------------------------------------------------------------- forward

    def forward_sequence(self, ids, hidden=None, masks=None):
        """Unrolled forward over ids[batch, steps].

        Returns (logits [batch*steps, vocab] in time-major row order,
        final hidden states). masks=None runs the ungated warmup path.
        """
        return _run_stack(self, ids, hidden, masks)

    def init_hidden(self, batch):
        return [Tensor(np.zeros((batch, self.spec.hidden), dtype=T.default_dtype()))
                for _ in self.cells]

    # ----------------------------------------------------------- accounting

    def expected_size_tensor(self) -> Tensor:
        """Differentiable expected surviving prunable parameters, all gates."""
        total = None
        for _, gate in self.gates():
            if not isinstance(gate, HardConcreteGate):
                continue
            e = gate.expected_l0()
            total = e if total is None else T.add(total, e)
        if total is None:
            raise ValueError("model has no stochastic gates")
        return total

    def weight_count(self):
        """Model weights only; gate logits are training state, not size."""
        total = self.embedding.weight_count()
        for cell in self.cells:
            total += cell.wx.weight_count() + cell.wh.weight_count() + cell.b.size
        if not self.tie_weights:
            total += self.out.W.size
        if self.out.bias is not None:
            total += self.out.bias.size
        return total

    def parameter_count(self):
        return parameter_count(self)

    def compact(self):
        return CompactedLM(self)


def parameter_count(model):
    """ParamCount over any model exposing gated_layers()/weight_count()."""
    total = model.weight_count()
    prunable = 0
    kept_expected = 0.0
    kept_actual = 0
    for _, layer in model.gated_layers():
        prunable += layer.prunable_count()
        e, a = layer.kept_counts()
        kept_expected += e
        kept_actual += a
    return ParamCount(total=total, prunable=prunable,
                      kept_expected=kept_expected, kept_actual=kept_actual)


@dataclass
class ParamCount:
    total: int
    prunable: int
    kept_expected: float
    kept_actual: int

    @property
    def kept_total(self) -> int:
        return self.total - self.prunable + self.kept_actual

    @property
    def compression(self) -> float:
        return 1.0 - self.kept_total / self.total if self.total else 0.0

    @property
    def prunable_compression(self) -> float:
        return 1.0 - self.kept_actual / self.prunable if self.prunable else 0.0


class CompactedLM:
    """Inference-only model with pruned components deleted."""

    def __init__(self, source: RecurrentLM):
        self.spec = source.spec
        self.embedding = (compact(source.embedding)
                          if isinstance(source.embedding, AdaptiveEmbedding)
                          else source.embedding)
        self.cells = []
        for cell in source.cells:
            new = object.__new__(RecurrentCell)
            new.wx = compact(cell.wx) if cell.wx.gate is not None else cell.wx
            new.wh = compact(cell.wh) if cell.wh.gate is not None else cell.wh
            new.b = cell.b
            self.cells.append(new)
        self.out = source.out
        self.tie_weights = source.tie_weights

    def gated_layers(self):
        return []

    def parameters(self):
        out = []
        for pname, p in self.embedding.parameters():
            out.append((f"embedding.{pname}", p))
        for i, cell in enumerate(self.cells):
            for pname, p in cell.wx.parameters():
                out.append((f"cell{i}.wx.{pname}", p))
            for pname, p in cell.wh.parameters():
                out.append((f"cell{i}.wh.{pname}", p))
            out.append((f"cell{i}.b", cell.b))
        if not self.tie_weights:
            out.append(("out.W", self.out.W))
        if self.out.bias is not None:
            out.append(("out.bias", self.out.bias))
        return out

    def forward_sequence(self, ids, hidden=None, masks=None):
        return _run_stack(self, ids, hidden, None)

    def init_hidden(self, batch):
        return [Tensor(np.zeros((batch, self.spec.hidden), dtype=T.default_dtype()))
                for _ in self.cells]

    def weight_count(self):
        total = 0
        seen = set()
        for _, p in self.parameters():
            if id(p) in seen:
                continue
            seen.add(id(p))
            total += p.size
        return total
