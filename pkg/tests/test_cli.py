import json
import math
import os

import numpy as np
import pytest
from click.testing import CliRunner

from factorprune import config as config_mod
from factorprune import corpus as C
from factorprune.cli import main
from factorprune.config import RunConfig


@pytest.fixture
def runner():
    return CliRunner()


def write_config(tmp_path, **overrides):
    cfg = RunConfig()
    cfg.corpus_path = str(tmp_path / "corpus.txt")
    cfg.model.dim = 24
    cfg.model.hidden = 24
    cfg.train.batch_size = 4
    cfg.train.unroll = 16
    cfg.train.total_steps = 30
    cfg.train.warmup_steps = 6
    cfg.train.log_every = 5
    cfg.controller.anneal_steps = 12
    cfg.controller.target_scope = "prunable"
    cfg.target_compression = 0.5
    cfg.out_dir = str(tmp_path / "run")
    for key, value in overrides.items():
        holder = cfg
        *parts, last = key.split(".")
        for part in parts:
            holder = getattr(holder, part)
        setattr(holder, last, value)
    (tmp_path / "corpus.txt").write_bytes(C.make_zipf_text(6000, n_symbols=40, seed=7))
    path = tmp_path / "config.json"
    config_mod.save(cfg, path)
    return path, cfg


def test_eval_fresh_model_uniform_bpc(tmp_path, runner):
    # vocab 64 -> a fresh (zero output) model predicts uniformly: bpc = 6.0
    cfg_path, cfg = write_config(tmp_path, **{"train.total_steps": 1,
                                              "train.warmup_steps": 1})
    (tmp_path / "corpus.txt").write_bytes(C.make_zipf_text(8000, n_symbols=64,
                                                           exponent=0.01, seed=1))
    r = runner.invoke(main, ["train", "--config", str(cfg_path)])
    assert r.exit_code == 0, r.output
    ckpt = json.loads(r.output.strip())["checkpoint"]
    # undo the single step: evaluate a fresh model instead
    from factorprune import checkpoint as ckpt_mod
    from factorprune.runner import build_corpus, build_model

    corp = build_corpus(cfg)
    assert corp.vocab_size == 64
    fresh = build_model(cfg, corp)
    ckpt_mod.save_model(tmp_path / "fresh.ckpt", fresh)
    r = runner.invoke(main, ["eval", "--config", str(cfg_path),
                             "--from", str(tmp_path / "fresh.ckpt"),
                             "--split", "valid"])
    assert r.exit_code == 0, r.output
    bpc = json.loads(r.output.strip())["bpc"]
    assert bpc == pytest.approx(math.log2(64), abs=1e-6)


def test_prune_compact_eval_pipeline(tmp_path, runner):
    cfg_path, cfg = write_config(tmp_path)
    r = runner.invoke(main, ["prune", "--config", str(cfg_path)])
    assert r.exit_code == 0, r.output
    out = json.loads(r.output.strip())
    assert os.path.exists(out["checkpoint"])
    assert os.path.exists(os.path.join(cfg.out_dir, "prune_report.json"))
    assert os.path.exists(os.path.join(cfg.out_dir, "metrics.jsonl"))

    r2 = runner.invoke(main, ["compact", "--config", str(cfg_path),
                              "--from", out["checkpoint"]])
    assert r2.exit_code == 0, r2.output
    compacted = json.loads(r2.output.strip())["checkpoint"]

    bpcs = {}
    for name, ck in (("masked", out["checkpoint"]), ("compacted", compacted)):
        rr = runner.invoke(main, ["eval", "--config", str(cfg_path),
                                  "--from", ck, "--split", "test"])
        assert rr.exit_code == 0, rr.output
        bpcs[name] = json.loads(rr.output.strip())["bpc"]
    assert bpcs["masked"] == pytest.approx(bpcs["compacted"], abs=1e-6)


def test_report_reconstructs_compression(tmp_path, runner):
    cfg_path, cfg = write_config(tmp_path)
    r = runner.invoke(main, ["prune", "--config", str(cfg_path)])
    assert r.exit_code == 0, r.output
    r2 = runner.invoke(main, ["report", cfg.out_dir])
    assert r2.exit_code == 0, r2.output
    from factorprune.report import PruneReport

    rep = PruneReport.load(os.path.join(cfg.out_dir, "prune_report.json"))
    pct = f"{rep.compression * 100:.1f}%"
    assert pct in r2.output
    assert "flop-l0" in r2.output


def test_error_line_is_machine_parsable(tmp_path, runner):
    bad = tmp_path / "bad.json"
    bad.write_text('{"method": "nope"}')
    r = runner.invoke(main, ["train", "--config", str(bad)])
    assert r.exit_code == 2
    err_lines = [l for l in r.output.strip().split("\n") if l]
    parsed = json.loads(err_lines[-1])
    assert parsed["error"] == "bad-config"


def test_missing_checkpoint_error(tmp_path, runner):
    cfg_path, _ = write_config(tmp_path)
    r = runner.invoke(main, ["eval", "--config", str(cfg_path),
                             "--from", str(tmp_path / "missing.ckpt")])
    assert r.exit_code != 0


def test_flag_overrides_config(tmp_path, runner):
    cfg_path, cfg = write_config(tmp_path)
    out2 = str(tmp_path / "other")
    r = runner.invoke(main, ["prune", "--config", str(cfg_path),
                             "--method", "np-l0", "--out", out2,
                             "--target-compression", "0.4", "--seed", "9"])
    assert r.exit_code == 0, r.output
    saved = config_mod.load(os.path.join(out2, "config.json"))
    assert saved.method == "np-l0"
    assert saved.target_compression == 0.4
    assert saved.seed == 9


def test_bench_writes_machine_readable_rows(tmp_path, runner):
    r = runner.invoke(main, ["bench", "--d-out", "96", "--d-in", "96",
                             "--rank", "48", "--kept", "24,12", "--batch", "8",
                             "--trials", "5", "--out", str(tmp_path)])
    assert r.exit_code == 0, r.output
    rows = [json.loads(l) for l in
            (tmp_path / "bench.jsonl").read_text().strip().split("\n")]
    assert len(rows) == 3
    assert rows[0]["kept"] == 48 and rows[0]["speedup"] == 1.0
    assert "speedup" in r.output


def test_bench_kernels_mode(tmp_path, runner):
    r = runner.invoke(main, ["bench", "--kernels", "--out", str(tmp_path)])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "bench_kernels.jsonl").exists()


def test_fac_train_then_eval(tmp_path, runner):
    cfg_path, cfg = write_config(tmp_path, method="fac",
                                 **{"train.total_steps": 20})
    r = runner.invoke(main, ["train", "--config", str(cfg_path)])
    assert r.exit_code == 0, r.output
    ck = json.loads(r.output.strip())["checkpoint"]
    rr = runner.invoke(main, ["eval", "--config", str(cfg_path), "--from", ck])
    assert rr.exit_code == 0, rr.output
