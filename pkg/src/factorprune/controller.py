"""Drives the expected model size to an exact target.

Two mechanisms:
  LagrangianController  adds lambda1*(s-t) + lambda2*(s-t)^2 to the loss
                        and ascends the multipliers every step, while the
                        kept-size target t anneals linearly from the full
                        size down to the requested budget.
  AgpScheduler          magnitude pruning of plain diagonal masks under a
                        cubic sparsity ramp, with an L1 penalty keeping
                        the surviving mask values small.
"""

from __future__ import annotations


from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .gates import PlainMask
from .tensor import Tensor


def linear_ramp(k: int, m: int, t_max: float) -> float:
    """min(1, k/m) * t_max; the annealing rule for the scheduled amount."""
    if m <= 0:
        raise ValueError("annealing length m must be positive")
    if k < 0:
        raise ValueError("step k must be non-negative")
    return min(1.0, k / m) * t_max


class LagrangianController:
    """Equality constraint s(alpha) = t enforced by adversarial multipliers.

    Multipliers start at zero and are updated by gradient ascent on the
    penalty, so persistent violation keeps raising the price until the
    expected size lands on target. The violation is normalized by the
    prunable total by default, making lr_lambda roughly size-independent
    (set normalize=False for the raw units).
    """

    def __init__(self, prunable_total: float, target_kept: float, m: int,
                 lr_lambda: float = 1.0, normalize: bool = True):
        if target_kept < 0 or target_kept > prunable_total:
            raise ValueError("target_kept must lie in [0, prunable_total]")
        self.prunable_total = float(prunable_total)
        self.t_max = float(target_kept)
        self.m = int(m)
        self.lr_lambda = float(lr_lambda)
        self.normalize = bool(normalize)
        self.lambda1 = 0.0
        self.lambda2 = 0.0
        self.k = 0

    @property
    def removal_max(self) -> float:
        return self.prunable_total - self.t_max

    def scheduled_removal(self, k: int | None = None) -> float:
        return linear_ramp(self.k if k is None else k, self.m, self.removal_max)

    def target_size(self, k: int | None = None) -> float:
        """Kept-size target t at pruning step k (defaults to current step)."""
        return self.prunable_total - self.scheduled_removal(k)

    def _unit(self) -> float:
        return self.prunable_total if self.normalize else 1.0

    def penalty(self, s: Tensor, k: int | None = None) -> Tensor:
        """lambda1*(s-t) + lambda2*(s-t)^2 with multipliers held constant."""
        t = self.target_size(k)
        c = 1.0 / self._unit()
        diff = T.add(T.scale(s, c), -t * c)
        return T.add(T.scale(diff, self.lambda1), T.scale(T.mul(diff, diff), self.lambda2))

    def violation(self, s_value: float, k: int | None = None) -> float:
        return (float(s_value) - self.target_size(k)) / self._unit()

    def update_multipliers(self, s_value: float):
        """Ascent step on (lambda1, lambda2), then advance the schedule.

        lambda2's gradient is a square, so starting from zero it can
        never go negative.
        """
        v = self.violation(s_value)
        self.lambda1 += self.lr_lambda * v
        self.lambda2 += self.lr_lambda * v * v
        self.k += 1

    def state(self):
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "k": self.k,
            "m": self.m,
            "t_max": self.t_max,
            "prunable_total": self.prunable_total,
            "lr_lambda": self.lr_lambda,
            "normalize": 1.0 if self.normalize else 0.0,
        }

    @classmethod
    def from_state(cls, st):
        ctrl = cls(prunable_total=st["prunable_total"], target_kept=st["t_max"],
                   m=int(st["m"]), lr_lambda=st["lr_lambda"],
                   normalize=bool(st["normalize"]))
        ctrl.lambda1 = float(st["lambda1"])
        ctrl.lambda2 = float(st["lambda2"])
        ctrl.k = int(st["k"])
        return ctrl


@dataclass
class AgpScheduler:
    """Cubic sparsity ramp for magnitude pruning of plain masks."""

    final_sparsity: float
    begin_step: int
    end_step: int
    initial_sparsity: float = 0.0
    prune_frequency: int = 1
    l1_coeff: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.initial_sparsity <= self.final_sparsity <= 1.0:
            raise ValueError("need 0 <= initial <= final <= 1")
        if self.begin_step > self.end_step:
            raise ValueError("begin_step must not exceed end_step")
        if self.prune_frequency < 1:
            raise ValueError("prune_frequency must be >= 1")

    def sparsity(self, step: int) -> float:
        if step < self.begin_step:
            return self.initial_sparsity
        if step >= self.end_step:
            return self.final_sparsity
        span = self.end_step - self.begin_step
        done = ((step - self.begin_step) // self.prune_frequency) * self.prune_frequency
        progress = done / span
        s = self.final_sparsity + (self.initial_sparsity - self.final_sparsity) * (1.0 - progress) ** 3
        return float(np.clip(s, self.initial_sparsity, self.final_sparsity))

    def is_prune_step(self, step: int) -> bool:
        if step < self.begin_step or step > self.end_step:
            return False
        return (step - self.begin_step) % self.prune_frequency == 0


def collect_plain_masks(model):
    masks = []
    for name, layer in model.gated_layers():
        gate = getattr(layer, "gate", None)
        if isinstance(gate, PlainMask):
            masks.append((name, gate))
        gates = getattr(layer, "clusters", None)
        if gates is not None:
            for i, c in enumerate(layer.clusters):
                if isinstance(c["gate"], PlainMask):
                    masks.append((f"{name}.cluster{i}", c["gate"]))
    return masks


def agp_prune_step(model, sched: AgpScheduler, step: int):
    """Zero the globally smallest-magnitude mask entries up to the schedule.

    Already-zeroed entries stay zeroed; returns (sparsity, per-mask zero
    counts) for reporting.
    """
    masks = collect_plain_masks(model)
    if not masks:
        raise ValueError("model has no plain masks; AGP needs gate='plain'")
    target = sched.sparsity(step)
    n_total = sum(g.n for _, g in masks)
    n_zero_target = int(round(target * n_total))
    entries = []  # (|g|, mask_idx, component_idx) over active entries
    n_frozen = 0
    for mi, (_, g) in enumerate(masks):
        n_frozen += int(g.frozen.sum())
        active = np.flatnonzero(~g.frozen)
        for j in active:
            entries.append((abs(float(g.g.data[j])), mi, int(j)))
    need = n_zero_target - n_frozen
    if need > 0:
        entries.sort()
        for _, mi, j in entries[:need]:
            masks[mi][1].frozen[j] = True
    for _, g in masks:
        g.enforce_frozen()
    counts = {name: int(g.frozen.sum()) for name, g in masks}
    achieved = sum(counts.values()) / n_total
    return achieved, counts


def agp_l1_penalty(model, l1_coeff: float) -> Tensor | None:
    if l1_coeff <= 0:
        return None
    masks = collect_plain_masks(model)
    total = None
    for _, g in masks:
        p = g.l1_penalty()
        total = p if total is None else T.add(total, p)
    return None if total is None else T.scale(total, l1_coeff)
