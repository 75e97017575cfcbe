"""Binary checkpoints with bit-exact round trips.

Layout (all integers little-endian):
  magic b"FPCK" | u8 version | u8 precision (0=f64, 1=f32) | u32 n_records
  record: u8 kind | u16 name_len | name utf-8 | u64 payload_len | payload
  kinds:  1 = array   u8 dtype | u8 ndim | ndim x u64 shape | raw LE data
          2 = json    utf-8 object (headers, states, RNG)

Arrays are restored byte-for-byte, so a loaded model reproduces forward
outputs bit-identically.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import tensor as T
from .gates import HardConcreteGate, PlainMask
from .layers import (
    CompactedColumnLinear,
    CompactedEmbedding,
    CompactedLinear,
    Embedding,
    Linear,
)
from .model import CompactedLM, ModelSpec, RecurrentCell, RecurrentLM
from .tensor import Tensor

MAGIC = b"FPCK"
VERSION = 1

_KIND_ARRAY = 1
_KIND_JSON = 2

_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8", 3: "|b1", 4: "<u8"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _array_payload(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = None
    for dt, c in _DTYPE_CODES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            code = c
            break
    if code is None:
        if arr.dtype == np.bool_:
            code = 3
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype}")
    le = arr.astype(_DTYPES[code], copy=False)
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + le.tobytes()


def _parse_array(payload: bytes) -> np.ndarray:
    code, ndim = struct.unpack_from("<BB", payload, 0)
    shape = struct.unpack_from(f"<{ndim}Q", payload, 2)
    off = 2 + 8 * ndim
    arr = np.frombuffer(payload[off:], dtype=_DTYPES[code]).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


class _Writer:
    def __init__(self, path, precision_flag):
        self._fh = open(path, "wb")
        self._records = []
        self._precision = precision_flag

    def add_array(self, name, arr):
        self._records.append((_KIND_ARRAY, name, _array_payload(np.asarray(arr))))

    def add_json(self, name, obj):
        self._records.append((_KIND_JSON, name, json.dumps(obj, sort_keys=True).encode("utf-8")))

    def close(self):
        self._fh.write(MAGIC)
        self._fh.write(struct.pack("<BBI", VERSION, self._precision, len(self._records)))
        for kind, name, payload in self._records:
            nb = name.encode("utf-8")
            self._fh.write(struct.pack("<BH", kind, len(nb)))
            self._fh.write(nb)
            self._fh.write(struct.pack("<Q", len(payload)))
            self._fh.write(payload)
        self._fh.close()


def read_records(path):
    """(header dict, ordered {name: array-or-json}) from a checkpoint file."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, precision, n = struct.unpack_from("<BBI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 10
    records = {}
    for _ in range(n):
        kind, name_len = struct.unpack_from("<BH", blob, off)
        off += 3
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (payload_len,) = struct.unpack_from("<Q", blob, off)
        off += 8
        payload = blob[off:off + payload_len]
        off += payload_len
        if kind == _KIND_ARRAY:
            records[name] = _parse_array(payload)
        elif kind == _KIND_JSON:
            records[name] = json.loads(payload.decode("utf-8"))
        else:
            raise CheckpointError(f"{path}: unknown record kind {kind}")
    return {"version": version, "precision": precision}, records


def _rng_state(rng):
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": st["has_uint32"],
        "uinteger": st["uinteger"],
    }


def _restore_rng(obj):
    rng = np.random.default_rng(0)
    if obj["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported generator {obj['bit_generator']}")
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(obj["state"]), "inc": int(obj["inc"])},
        "has_uint32": obj["has_uint32"],
        "uinteger": obj["uinteger"],
    }
    return rng


def _gate_records(w, name, gate):
    if isinstance(gate, HardConcreteGate):
        w.add_json(f"gate.{name}.header", {
            "type": "hard_concrete", "l": gate.l, "r": gate.r, "beta": gate.beta,
            "kept_value_mode": gate.kept_value_mode,
        })
        w.add_array(f"gate.{name}.block_sizes", gate.block_sizes)
    elif isinstance(gate, PlainMask):
        w.add_json(f"gate.{name}.header", {"type": "plain"})
        w.add_array(f"gate.{name}.block_sizes", gate.block_sizes)
        w.add_array(f"gate.{name}.frozen", gate.frozen)


def _iter_gates(model):
    if hasattr(model, "gates"):
        return model.gates()
    return []


def save_model(path, model, config_dict=None, controller=None, optimizer=None,
               rng=None, train_state=None, hidden=None):
    precision = 1 if T.default_dtype() == np.float32 else 0
    w = _Writer(path, precision)
    if isinstance(model, RecurrentLM):
        meta = {"kind": "recurrent_lm", "spec": _spec_dict(model.spec)}
    elif isinstance(model, CompactedLM):
        meta = {"kind": "compacted_lm", "spec": _spec_dict(model.spec),
                "structure": _compacted_structure(model)}
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")
    w.add_json("meta", meta)
    if config_dict is not None:
        w.add_json("config", config_dict)
    for name, p in model.parameters():
        w.add_array(f"param.{name}", p.data)
    for name, gate in _iter_gates(model):
        _gate_records(w, name, gate)
    if isinstance(model, CompactedLM):
        for i, cell in enumerate(model.cells):
            if isinstance(cell.wx, CompactedColumnLinear):
                w.add_array(f"param.cell{i}.wx.kept_idx", cell.wx.kept_idx.astype(np.int64))
            if isinstance(cell.wh, CompactedColumnLinear):
                w.add_array(f"param.cell{i}.wh.kept_idx", cell.wh.kept_idx.astype(np.int64))
    if controller is not None:
        w.add_json("controller", controller.state())
    if optimizer is not None:
        w.add_json("optimizer.meta", {"step_count": optimizer.step_count})
        for i, arr in enumerate(optimizer.state_arrays()):
            w.add_array(f"optimizer.buf{i}", arr)
    if rng is not None:
        w.add_json("rng", _rng_state(rng))
    if train_state is not None:
        w.add_json("train_state", train_state.as_dict())
    if hidden is not None:
        w.add_json("hidden.meta", {"count": len(hidden)})
        for i, h in enumerate(hidden):
            w.add_array(f"hidden.{i}", h.data if hasattr(h, "data") else h)
    w.close()


def _spec_dict(spec: ModelSpec):
    return {
        "vocab_size": spec.vocab_size, "dim": spec.dim, "hidden": spec.hidden,
        "layers": spec.layers, "rank": spec.rank, "method": spec.method,
        "adaptive": spec.adaptive,
        "cluster_boundaries": spec.cluster_boundaries,
        "cluster_dims": spec.cluster_dims,
        "tie_weights": spec.tie_weights,
        "fac_keep_fraction": spec.fac_keep_fraction,
        "gate_kwargs": spec.gate_kwargs,
    }


def _spec_from_dict(d):
    d = dict(d)
    if d.get("cluster_boundaries"):
        d["cluster_boundaries"] = [tuple(b) for b in d["cluster_boundaries"]]
    return ModelSpec(**d)


def _compacted_structure(model: CompactedLM):
    cells = []
    for cell in model.cells:
        entry = {}
        for tag, lay in (("wx", cell.wx), ("wh", cell.wh)):
            entry[tag] = {"kind": lay.kind}
        cells.append(entry)
    emb_kind = getattr(model.embedding, "kind", "embedding")
    return {"cells": cells, "embedding": emb_kind}


def load_model(path):
    """Rebuild the model plus auxiliary state from a checkpoint.

    Returns (model, aux) where aux holds whichever of controller state,
    optimizer arrays, rng, train_state, config were saved.
    """
    header, records = read_records(path)
    meta = records["meta"]
    spec = _spec_from_dict(meta["spec"])
    if meta["kind"] == "recurrent_lm":
        model = RecurrentLM(spec, rng=np.random.default_rng(0))
        _restore_params(model, records)
        _restore_gates(model, records)
    elif meta["kind"] == "compacted_lm":
        model = _build_compacted(spec, meta["structure"], records)
    else:
        raise CheckpointError(f"unknown model kind {meta['kind']}")
    aux = {"header": header}
    if "config" in records:
        aux["config"] = records["config"]
    if "controller" in records:
        aux["controller_state"] = records["controller"]
    if "optimizer.meta" in records:
        bufs = []
        i = 0
        while f"optimizer.buf{i}" in records:
            bufs.append(records[f"optimizer.buf{i}"])
            i += 1
        aux["optimizer_state"] = {"step_count": records["optimizer.meta"]["step_count"],
                                  "arrays": bufs}
    if "rng" in records:
        aux["rng"] = _restore_rng(records["rng"])
    if "train_state" in records:
        aux["train_state"] = records["train_state"]
    if "hidden.meta" in records:
        aux["hidden"] = [records[f"hidden.{i}"]
                         for i in range(records["hidden.meta"]["count"])]
    return model, aux


def _restore_params(model, records):
    for name, p in model.parameters():
        key = f"param.{name}"
        if key not in records:
            raise CheckpointError(f"missing parameter record {key}")
        arr = records[key]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(f"{key}: shape {arr.shape} != expected {p.shape}")
        p.data = arr


def _restore_gates(model, records):
    for name, gate in _iter_gates(model):
        head = records.get(f"gate.{name}.header")
        if head is None:
            raise CheckpointError(f"missing gate header for {name}")
        if isinstance(gate, HardConcreteGate):
            gate.l = float(head["l"])
            gate.r = float(head["r"])
            gate.beta = float(head["beta"])
            gate.kept_value_mode = head["kept_value_mode"]
            gate.block_sizes = records[f"gate.{name}.block_sizes"]
        elif isinstance(gate, PlainMask):
            gate.block_sizes = records[f"gate.{name}.block_sizes"]
            gate.frozen = records[f"gate.{name}.frozen"].astype(bool)


def _build_compacted(spec, structure, records):
    model = object.__new__(CompactedLM)
    model.spec = spec
    model.tie_weights = spec.tie_weights

    def param(name):
        key = f"param.{name}"
        if key not in records:
            raise CheckpointError(f"missing parameter record {key}")
        return records[key]

    def tparam(name):
        arr = param(name)
        return Tensor(arr, dtype=arr.dtype)

    emb_kind = structure["embedding"]
    if emb_kind == "embedding":
        emb = object.__new__(Embedding)
        emb.E = tparam("embedding.E")
        emb.n_tokens, emb.dim = emb.E.shape
        model.embedding = emb
    else:
        tables = []
        for i in range(len(spec.cluster_boundaries)):
            tables.append((tparam(f"embedding.E{i}"), tparam(f"embedding.O{i}")))
        model.embedding = CompactedEmbedding(spec.cluster_boundaries, spec.dim, tables)
    model.cells = []
    for i, entry in enumerate(structure["cells"]):
        cell = object.__new__(RecurrentCell)
        for tag in ("wx", "wh"):
            kind = entry[tag]["kind"]
            base = f"cell{i}.{tag}"
            if kind in ("compacted", "factorized"):
                lay = CompactedLinear(tparam(f"{base}.P"), tparam(f"{base}.Q"), None)
            elif kind == "compacted_columns":
                lay = CompactedColumnLinear(tparam(f"{base}.W"), param(f"{base}.kept_idx"), None)
            else:
                raise CheckpointError(f"unknown compacted layer kind {kind}")
            setattr(cell, tag, lay)
        cell.b = tparam(f"cell{i}.b")
        model.cells.append(cell)
    out = object.__new__(Linear)
    if spec.tie_weights:
        out.W = model.embedding.E
    else:
        out.W = tparam("out.W")
    out.bias = tparam("out.bias") if "param.out.bias" in records else None
    out.d_out, out.d_in = out.W.shape
    model.out = out
    return model
