import numpy as np
import pytest

from factorprune import checkpoint as ckpt
from factorprune import corpus as C
from factorprune import tensor as T
from factorprune.controller import LagrangianController
from factorprune.model import ModelSpec, RecurrentLM
from factorprune.optim import SGD
from factorprune.training import TrainState


def make_model(method="flop-l0", adaptive=False, seed=0, vocab=30):
    kw = {}
    if adaptive:
        kw = {"adaptive": True,
              "cluster_boundaries": [(0, 6), (6, 15), (15, vocab)],
              "cluster_dims": [16, 8, 4]}
    spec = ModelSpec(vocab_size=vocab, dim=16, hidden=16, layers=2,
                     method=method, **kw)
    return RecurrentLM(spec, rng=np.random.default_rng(seed))


def forward_bits(model, ids):
    with T.no_grad():
        masks = model.deterministic_masks() if hasattr(model, "deterministic_masks") else None
        logits, _ = model.forward_sequence(ids, None, masks or None)
    return logits.data.tobytes()


@pytest.mark.parametrize("method,adaptive", [
    ("flop-l0", False),
    ("flop-l0", True),
    ("flop-agp", False),
    ("np-l0", False),
    ("fac", False),
])
def test_roundtrip_forward_bit_identical(tmp_path, method, adaptive, rng):
    model = make_model(method, adaptive)
    # scatter the gate state so masks are nontrivial
    for _, gate in model.gates():
        if hasattr(gate, "alpha"):
            gate.alpha.data[:] = rng.standard_normal(gate.n) * 4
        else:
            gate.g.data[:] = rng.uniform(0.1, 1.0, gate.n)
            gate.frozen[rng.integers(0, gate.n)] = True
            gate.enforce_frozen()
    ids = rng.integers(0, 30, (3, 7))
    before = forward_bits(model, ids)
    path = tmp_path / "m.ckpt"
    ckpt.save_model(path, model)
    loaded, _aux = ckpt.load_model(path)
    assert forward_bits(loaded, ids) == before


def test_roundtrip_compacted(tmp_path, rng):
    model = make_model("flop-l0")
    for _, gate in model.gates():
        gate.alpha.data[:] = rng.standard_normal(gate.n) * 5
    comp = model.compact()
    ids = rng.integers(0, 30, (2, 9))
    before = forward_bits(comp, ids)
    path = tmp_path / "c.ckpt"
    ckpt.save_model(path, comp)
    loaded, _ = ckpt.load_model(path)
    assert forward_bits(loaded, ids) == before
    assert loaded.weight_count() == comp.weight_count()


def test_roundtrip_compacted_column(tmp_path, rng):
    model = make_model("np-l0")
    for _, gate in model.gates():
        gate.alpha.data[:] = rng.standard_normal(gate.n) * 5
    comp = model.compact()
    ids = rng.integers(0, 30, (2, 5))
    before = forward_bits(comp, ids)
    path = tmp_path / "cc.ckpt"
    ckpt.save_model(path, comp)
    loaded, _ = ckpt.load_model(path)
    assert forward_bits(loaded, ids) == before


def test_aux_state_roundtrip(tmp_path, rng):
    model = make_model()
    ctrl = LagrangianController(prunable_total=100.0, target_kept=40.0, m=7,
                                lr_lambda=0.9)
    ctrl.lambda1, ctrl.lambda2, ctrl.k = 0.5, 0.25, 3
    opt = SGD([p for _, p in model.parameters()], lr=0.1)
    opt.buffers[0][:] = 1.5
    opt.step_count = 11
    train_rng = np.random.default_rng(123)
    train_rng.standard_normal(17)  # advance the stream
    state = TrainState(step=11, epoch=2, prune_step=3, best_valid_bpc=1.5)

    path = tmp_path / "full.ckpt"
    ckpt.save_model(path, model, config_dict={"method": "flop-l0"},
                    controller=ctrl, optimizer=opt, rng=train_rng,
                    train_state=state)
    _, aux = ckpt.load_model(path)

    ctrl2 = LagrangianController.from_state(aux["controller_state"])
    assert ctrl2.lambda1 == 0.5 and ctrl2.lambda2 == 0.25 and ctrl2.k == 3
    assert ctrl2.m == 7 and ctrl2.lr_lambda == 0.9

    assert aux["optimizer_state"]["step_count"] == 11
    assert np.array_equal(aux["optimizer_state"]["arrays"][0], opt.buffers[0])

    # restored stream continues identically
    expect = train_rng.standard_normal(5)
    got = aux["rng"].standard_normal(5)
    assert np.array_equal(expect, got)

    assert aux["train_state"]["step"] == 11
    assert aux["config"]["method"] == "flop-l0"


def test_gate_constants_recorded(tmp_path):
    model = make_model()
    path = tmp_path / "g.ckpt"
    ckpt.save_model(path, model)
    _, records = ckpt.read_records(path)
    head = records["gate.cell0.wx.header"]
    assert head["l"] == -0.1 and head["r"] == 1.1 and head["beta"] == 1.0


def test_precision_flag(tmp_path):
    model = make_model()
    path = tmp_path / "p.ckpt"
    ckpt.save_model(path, model)
    header, _ = ckpt.read_records(path)
    assert header["precision"] == 0  # float64 suite default


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.read_records(path)


def test_float32_roundtrip(tmp_path, rng):
    T.set_default_dtype("float32")
    model = make_model()
    ids = rng.integers(0, 30, (2, 5))
    before = forward_bits(model, ids)
    path = tmp_path / "f32.ckpt"
    ckpt.save_model(path, model)
    header, _ = ckpt.read_records(path)
    assert header["precision"] == 1
    loaded, _ = ckpt.load_model(path)
    assert loaded.cells[0].wx.P.data.dtype == np.float32
    assert forward_bits(loaded, ids) == before
