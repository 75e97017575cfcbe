"""Warmup-then-prune training loop and bits-per-character evaluation.

Warmup trains the factorized model with gates out of the graph (masks
fully open); the pruning phase samples one mask per gate per batch,
adds the size penalty, and ascends the Lagrangian multipliers after
every parameter step. Hidden state is carried across batches with
truncated backpropagation at the unroll length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .controller import LagrangianController, agp_l1_penalty, agp_prune_step
from .model import RecurrentLM
from .optim import SGD, InverseSqrtSchedule, clip_grad_norm
from .tensor import Graph

LOG2E = 1.0 / math.log(2.0)


class TrainingDiverged(RuntimeError):
    """Raised on NaN/Inf loss; carries a diagnostic snapshot."""

    def __init__(self, snapshot):
        super().__init__(f"training diverged at step {snapshot.get('step')}")
        self.snapshot = snapshot


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    prune_step: int = 0
    best_valid_bpc: float = math.inf

    def as_dict(self):
        return {"step": self.step, "epoch": self.epoch,
                "prune_step": self.prune_step, "best_valid_bpc": self.best_valid_bpc}


@dataclass
class TrainLoopConfig:
    total_steps: int = 2000
    warmup_steps: int = 200
    lr: float = 0.3
    momentum: float = 0.9
    lr_warmup: int = 100
    clip_norm: float = 1.0
    alpha_lr_scale: float = 40.0
    alpha_momentum: float = 0.0  # velocity on gate logits risks overshooting
    unroll: int = 64
    batch_size: int = 32
    eval_every: int = 0          # 0: no mid-run evaluation
    agp: object = None           # AgpScheduler for flop-agp runs
    log_every: int = 10


def _is_gate_param(name: str) -> bool:
    return name.endswith(("alpha", "mask")) or ".alpha" in name


def build_optimizer(model, cfg: TrainLoopConfig):
    groups = []
    for name, p in model.parameters():
        if _is_gate_param(name):
            groups.append((p, cfg.alpha_lr_scale, cfg.alpha_momentum))
        else:
            groups.append((p, 1.0, None))
    sched = InverseSqrtSchedule(cfg.lr, warmup_steps=max(1, cfg.lr_warmup))
    return SGD(groups, momentum=cfg.momentum, schedule=sched)


def train(model: RecurrentLM, corpus, cfg: TrainLoopConfig,
          controller: LagrangianController | None = None,
          optimizer=None, metrics=None, rng=None, state: TrainState | None = None,
          initial_hidden=None):
    """Run the loop until cfg.total_steps; returns the final TrainState.

    controller is required for the Lagrangian methods and must be None
    for fac/flop-agp runs; cfg.agp drives flop-agp pruning. The batch at
    step k is a pure function of k, so resuming from (state, hidden, rng,
    optimizer state) replays the exact trajectory.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    state = state or TrainState()
    optimizer = optimizer or build_optimizer(model, cfg)
    hidden = initial_hidden
    n_windows = corpus.n_windows("train", cfg.batch_size, cfg.unroll)

    while state.step < cfg.total_steps:
        w = state.step % n_windows
        state.epoch = state.step // n_windows
        if w == 0:
            hidden = None  # lane origins moved back to the stream start
        x, y = corpus.window("train", w, cfg.batch_size, cfg.unroll)
        pruning = state.step >= cfg.warmup_steps
        targets = y.T.reshape(-1)  # time-major, matching forward_sequence

        record = {"step": state.step, "phase": "prune" if pruning else "warmup"}
        with Graph() as g:
            masks = model.sample_masks(rng) if pruning else None
            logits, hidden = model.forward_sequence(x, hidden, masks)
            loss = T.cross_entropy_logits(logits, targets)
            total = loss
            if pruning and controller is not None:
                s = model.expected_size_tensor()
                total = T.add(total, controller.penalty(s))
                record["s"] = float(s.data)
                record["t"] = controller.target_size()
            if pruning and cfg.agp is not None:
                l1 = agp_l1_penalty(model, cfg.agp.l1_coeff)
                if l1 is not None:
                    total = T.add(total, l1)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise TrainingDiverged(_snapshot(model, state, record, loss_value))
            g.backward(total)

        # clip stabilizes the recurrence; gate logits are excluded so the
        # size penalty reaches them undamped
        weights = [p for name, p in model.parameters() if not _is_gate_param(name)]
        grad_norm = clip_grad_norm(weights, cfg.clip_norm)
        optimizer.step()
        optimizer.zero_grad()

        if pruning and controller is not None:
            controller.update_multipliers(record["s"])
            record["lambda1"] = controller.lambda1
            record["lambda2"] = controller.lambda2
            state.prune_step = controller.k
        if pruning and cfg.agp is not None:
            for _, gate in model.gates():
                if hasattr(gate, "enforce_frozen"):
                    gate.enforce_frozen()
            if cfg.agp.is_prune_step(state.step - cfg.warmup_steps):
                achieved, _ = agp_prune_step(model, cfg.agp, state.step - cfg.warmup_steps)
                record["agp_sparsity"] = achieved

        record["loss"] = loss_value
        record["bpc"] = loss_value * LOG2E
        record["grad_norm"] = grad_norm
        record["lr"] = optimizer.schedule(optimizer.step_count - 1)
        state.step += 1
        if metrics is not None and (state.step % cfg.log_every == 0
                                    or state.step == cfg.total_steps):
            for name, layer in model.gated_layers():
                _, a = layer.kept_counts()
                record[f"kept.{name}"] = a
            metrics.emit(record)
        if cfg.eval_every and state.step % cfg.eval_every == 0:
            bpc = evaluate(model, corpus, "valid", batch_size=cfg.batch_size,
                           unroll=cfg.unroll)
            state.best_valid_bpc = min(state.best_valid_bpc, bpc)
            if metrics is not None:
                metrics.emit({"step": state.step, "phase": "eval", "valid_bpc": bpc})
    state.final_hidden = hidden
    return state


def _snapshot(model, state, record, loss_value):
    snap = dict(record)
    snap.update(state.as_dict())
    snap["loss"] = loss_value
    for name, p in model.parameters():
        snap[f"absmax.{name}"] = float(np.max(np.abs(p.data))) if p.size else 0.0
    return snap


def evaluate(model, corpus, split="test", batch_size=None, unroll=None) -> float:
    """Bits per character under deterministic masks (or a compacted model)."""
    masks = None
    if hasattr(model, "deterministic_masks"):
        dm = model.deterministic_masks()
        masks = dm if dm else None
    total_nats = 0.0
    total_chars = 0
    hidden = None
    with T.no_grad():
        for x, y in corpus.batches(split, batch_size=batch_size, unroll=unroll):
            logits, hidden = model.forward_sequence(x, hidden, masks)
            targets = y.T.reshape(-1)
            loss = T.cross_entropy_logits(logits, targets)
            n = targets.shape[0]
            total_nats += float(loss.data) * n
            total_chars += n
    if total_chars == 0:
        raise ValueError(f"split {split!r} has no full batch")
    return total_nats / total_chars * LOG2E


def overfit_one_batch(model, x, y, steps=200, cfg: TrainLoopConfig | None = None,
                      rng=None):
    """Sanity loop: repeat one batch; returns the final mean loss in nats."""
    cfg = cfg or TrainLoopConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    optimizer = build_optimizer(model, cfg)
    targets = y.T.reshape(-1)
    loss_value = math.inf
    for _ in range(steps):
        with Graph() as g:
            logits, _ = model.forward_sequence(x, None, None)
            loss = T.cross_entropy_logits(logits, targets)
            loss_value = float(loss.data)
            g.backward(loss)
        clip_grad_norm([p for _, p in model.parameters()], cfg.clip_norm)
        optimizer.step()
        optimizer.zero_grad()
    return loss_value
