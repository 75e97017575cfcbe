"""Wires a RunConfig into corpora, models, controllers and full runs.

The CLI subcommands and the acceptance tests both drive everything
through these entry points so behavior cannot drift between them.
"""

from __future__ import annotations

import os
from dataclasses import replace

import numpy as np

from . import checkpoint as ckpt
from . import corpus as corpus_mod
from . import tensor as T
from .config import RunConfig
from .controller import AgpScheduler, LagrangianController
from .metrics import MetricsWriter
from .model import ModelSpec, RecurrentLM, parameter_count
from .report import build_prune_report
from .training import TrainLoopConfig, TrainState, evaluate, train


def apply_precision(cfg: RunConfig):
    T.set_default_dtype(cfg.precision)


def build_corpus(cfg: RunConfig) -> corpus_mod.CharCorpus:
    if cfg.corpus_path:
        raw = open(cfg.corpus_path, "rb").read()
    else:
        raw = corpus_mod.bundled_text()
    return corpus_mod.from_text(
        raw, tuple(cfg.split_fractions), cfg.corpus_mode,
        unroll_length=cfg.train.unroll, batch_size=cfg.train.batch_size)


def _gate_kwargs(cfg: RunConfig):
    g = cfg.gates
    return {"alpha_init": g.alpha_init, "l": g.l, "r": g.r, "beta": g.beta,
            "jitter": g.jitter, "kept_value_mode": g.kept_value_mode}


def model_spec(cfg: RunConfig, vocab_size: int, fac_keep_fraction=1.0) -> ModelSpec:
    m = cfg.model
    boundaries = dims = None
    if m.adaptive_embedding:
        boundaries = corpus_mod.cluster_boundaries(vocab_size, tuple(m.cluster_quantiles))
        dims = [max(1, m.dim // div) for div in m.cluster_dim_divisors]
        if len(dims) != len(boundaries):
            raise ValueError("one dim divisor per cluster required")
    return ModelSpec(
        vocab_size=vocab_size, dim=m.dim, hidden=m.hidden, layers=m.layers,
        rank=m.rank, method=cfg.method, adaptive=m.adaptive_embedding,
        cluster_boundaries=boundaries, cluster_dims=dims,
        tie_weights=m.tie_weights, fac_keep_fraction=fac_keep_fraction,
        gate_kwargs=_gate_kwargs(cfg))


def reference_counts(cfg: RunConfig, vocab_size: int):
    """(total, prunable) of the full-rank factorized model at this config."""
    ref_cfg = replace(cfg, method="flop-l0")
    ref = RecurrentLM(model_spec(ref_cfg, vocab_size), rng=np.random.default_rng(0))
    counts = parameter_count(ref)
    return counts.total, counts.prunable


def removal_target(total: float, prunable: float, compression: float, scope: str) -> float:
    removed = compression * (total if scope == "total" else prunable)
    if removed > prunable:
        raise ValueError(
            f"target removes {removed:.0f} params but only {prunable:.0f} are prunable")
    return removed


def build_model(cfg: RunConfig, corpus) -> RecurrentLM:
    fac_keep = 1.0
    if cfg.method == "fac":
        total, prunable = reference_counts(cfg, corpus.vocab_size)
        removed = removal_target(total, prunable, cfg.target_compression,
                                 cfg.controller.target_scope)
        fac_keep = 1.0 - removed / prunable
    spec = model_spec(cfg, corpus.vocab_size, fac_keep_fraction=fac_keep)
    return RecurrentLM(spec, rng=np.random.default_rng([cfg.seed, 0]))


def build_controller(cfg: RunConfig, model) -> LagrangianController | None:
    if cfg.method not in ("flop-l0", "np-l0"):
        return None
    counts = parameter_count(model)
    removed = removal_target(counts.total, counts.prunable, cfg.target_compression,
                             cfg.controller.target_scope)
    return LagrangianController(
        prunable_total=counts.prunable, target_kept=counts.prunable - removed,
        m=cfg.controller.anneal_steps, lr_lambda=cfg.controller.lr_lambda,
        normalize=cfg.controller.normalize)


def build_agp(cfg: RunConfig, model) -> AgpScheduler | None:
    if cfg.method != "flop-agp":
        return None
    counts = parameter_count(model)
    removed = removal_target(counts.total, counts.prunable, cfg.target_compression,
                             cfg.controller.target_scope)
    # mask-entry sparsity approximates the parameter target; exact when all
    # blocks cost the same, parameter-weighted otherwise
    sparsity = min(1.0, removed / counts.prunable) if counts.prunable else 0.0
    a = cfg.agp
    return AgpScheduler(final_sparsity=sparsity, begin_step=a.begin_step,
                        end_step=a.end_step, prune_frequency=a.prune_frequency,
                        l1_coeff=a.l1_coeff, initial_sparsity=a.initial_sparsity)


def loop_config(cfg: RunConfig, agp=None, warmup_override=None, total_override=None):
    t = cfg.train
    return TrainLoopConfig(
        total_steps=total_override if total_override is not None else t.total_steps,
        warmup_steps=warmup_override if warmup_override is not None else t.warmup_steps,
        lr=t.lr, momentum=t.momentum, lr_warmup=t.lr_warmup, clip_norm=t.clip_norm,
        alpha_lr_scale=t.alpha_lr_scale, alpha_momentum=t.alpha_momentum,
        unroll=t.unroll, batch_size=t.batch_size,
        eval_every=t.eval_every, agp=agp, log_every=t.log_every)


def _ensure_out(cfg: RunConfig) -> str:
    out = cfg.out_dir or "run"
    os.makedirs(out, exist_ok=True)
    return out


def run_train(cfg: RunConfig):
    """Warmup-only training (full training for the fac baseline)."""
    apply_precision(cfg)
    out = _ensure_out(cfg)
    corpus = build_corpus(cfg)
    model = build_model(cfg, corpus)
    steps = cfg.train.total_steps if cfg.method == "fac" else cfg.train.warmup_steps
    lcfg = loop_config(cfg, warmup_override=steps, total_override=steps)
    rng = np.random.default_rng([cfg.seed, 1])
    from .config import save as save_cfg

    save_cfg(cfg, os.path.join(out, "config.json"))
    with MetricsWriter(os.path.join(out, "metrics.jsonl")) as metrics:
        from .training import build_optimizer

        optimizer = build_optimizer(model, lcfg)
        state = train(model, corpus, lcfg, controller=None, optimizer=optimizer,
                      metrics=metrics, rng=rng)
        valid = evaluate(model, corpus, "valid")
        metrics.emit({"step": state.step, "phase": "eval", "valid_bpc": valid})
    path = os.path.join(out, "warmup.ckpt" if cfg.method != "fac" else "model.ckpt")
    ckpt.save_model(path, model, config_dict=_cfg_dict(cfg), optimizer=optimizer,
                    rng=rng, train_state=state,
                    hidden=getattr(state, "final_hidden", None))
    return {"checkpoint": path, "valid_bpc": valid, "state": state, "model": model,
            "corpus": corpus}


def run_prune(cfg: RunConfig, warmup_checkpoint=None):
    """Warmup (inline or from a checkpoint) followed by the pruning phase."""
    apply_precision(cfg)
    if cfg.method == "fac":
        raise ValueError("the fac baseline trains fixed ranks; use run_train")
    out = _ensure_out(cfg)
    corpus = build_corpus(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    state = None
    initial_hidden = None
    aux = {}
    if warmup_checkpoint:
        model, aux = ckpt.load_model(warmup_checkpoint)
        if "rng" in aux:
            rng = aux["rng"]
        if "train_state" in aux:
            st = aux["train_state"]
            state = TrainState(step=int(st["step"]), epoch=int(st["epoch"]),
                               prune_step=int(st["prune_step"]),
                               best_valid_bpc=float(st["best_valid_bpc"]))
        if "hidden" in aux:
            from .tensor import Tensor

            initial_hidden = [Tensor(h, dtype=h.dtype) for h in aux["hidden"]]
    else:
        model = build_model(cfg, corpus)
    agp = build_agp(cfg, model)
    controller = build_controller(cfg, model)
    lcfg = loop_config(cfg, agp=agp)
    from .config import save as save_cfg
    from .training import build_optimizer

    save_cfg(cfg, os.path.join(out, "config.json"))
    optimizer = build_optimizer(model, lcfg)
    if "optimizer_state" in aux:
        # resume replays the exact trajectory: buffers, step counter,
        # hidden state and the RNG stream all continue where they stopped
        optimizer.load_state_arrays(aux["optimizer_state"]["arrays"],
                                    aux["optimizer_state"]["step_count"])
    with MetricsWriter(os.path.join(out, "metrics.jsonl")) as metrics:
        state = train(model, corpus, lcfg, controller=controller,
                      optimizer=optimizer, metrics=metrics, rng=rng, state=state,
                      initial_hidden=initial_hidden)
        valid = evaluate(model, corpus, "valid")
        test = evaluate(model, corpus, "test")
        metrics.emit({"step": state.step, "phase": "eval",
                      "valid_bpc": valid, "test_bpc": test})
    report = build_prune_report(model, method=cfg.method,
                                target_compression=cfg.target_compression)
    report.save(os.path.join(out, "prune_report.json"))
    path = os.path.join(out, "pruned.ckpt")
    ckpt.save_model(path, model, config_dict=_cfg_dict(cfg), controller=controller,
                    optimizer=optimizer, rng=rng, train_state=state,
                    hidden=getattr(state, "final_hidden", None))
    return {"checkpoint": path, "report": report, "valid_bpc": valid,
            "test_bpc": test, "state": state, "model": model, "corpus": corpus,
            "controller": controller}


def run_compact(cfg: RunConfig, pruned_checkpoint):
    apply_precision(cfg)
    out = _ensure_out(cfg)
    model, _aux = ckpt.load_model(pruned_checkpoint)
    if not isinstance(model, RecurrentLM):
        raise ValueError("compact expects a pruned (non-compacted) checkpoint")
    compacted = model.compact()
    report = build_prune_report(model, method=cfg.method,
                                target_compression=cfg.target_compression)
    path = os.path.join(out, "compacted.ckpt")
    ckpt.save_model(path, compacted, config_dict=_cfg_dict(cfg))
    report.save(os.path.join(out, "prune_report.json"))
    return {"checkpoint": path, "report": report, "model": compacted}


def run_eval(cfg: RunConfig, checkpoint_path, split="test"):
    apply_precision(cfg)
    corpus = build_corpus(cfg)
    model, _aux = ckpt.load_model(checkpoint_path)
    bpc = evaluate(model, corpus, split, batch_size=cfg.train.batch_size,
                   unroll=cfg.train.unroll)
    return {"split": split, "bpc": bpc, "model": model}


def _cfg_dict(cfg: RunConfig):
    from .config import render

    return render(cfg)
