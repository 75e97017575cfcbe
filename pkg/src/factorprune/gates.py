"""Hard Concrete gates over parameter blocks.

A gate holds one logit per prunable block (a rank-1 component, a matrix
column, an embedding dimension). Training samples relaxed masks in [0,1]
with point mass at both ends; the expected number of surviving
parameters has a closed form used by the size controller; inference
freezes a deterministic mask.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

U_EPS = 1e-8

# What value a kept component carries in the deterministic mask:
#   mean_logit  clip(sigmoid(alpha/beta)*(r-l)+l, 0, 1), the rectified
#               gate at the noise midpoint (default)
#   open_prob   the closed-form P(z > 0) itself
#   one         exactly 1.0
KEPT_VALUE_MODES = ("mean_logit", "open_prob", "one")


class HardConcreteGate:
    def __init__(self, n=None, block_sizes=None, alpha_init=2.2, l=-0.1, r=1.1,
                 beta=1.0, jitter=0.0, rng=None, kept_value_mode="mean_logit",
                 dtype=None):
        if block_sizes is None:
            if n is None:
                raise ValueError("need n or block_sizes")
            block_sizes = np.ones(n, dtype=np.int64)
        block_sizes = np.asarray(block_sizes, dtype=np.int64)
        n = block_sizes.shape[0]
        if not (l < 0.0 < 1.0 < r):
            raise ValueError(f"stretch constants must satisfy l < 0 < 1 < r, got l={l}, r={r}")
        if beta <= 0.0:
            raise ValueError(f"temperature must be positive, got {beta}")
        if np.any(block_sizes < 1):
            raise ValueError("block sizes must all be >= 1")
        if kept_value_mode not in KEPT_VALUE_MODES:
            raise ValueError(f"kept_value_mode must be one of {KEPT_VALUE_MODES}")
        alpha = np.full(n, float(alpha_init), dtype=dtype or T.default_dtype())
        if jitter > 0.0:
            if rng is None:
                raise ValueError("jitter needs an rng")
            alpha += jitter * rng.standard_normal(n)
        self.alpha = Tensor(alpha, requires_grad=True, name="alpha", dtype=alpha.dtype)
        self.l = float(l)
        self.r = float(r)
        self.beta = float(beta)
        self.block_sizes = block_sizes
        self.kept_value_mode = kept_value_mode

    @property
    def n(self):
        return self.block_sizes.shape[0]

    # ------------------------------------------------------------ training

    def sample_mask(self, u) -> Tensor:
        """Relaxed mask z in [0,1]^n from injected uniforms, on the tape."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.n,):
            raise DimensionError(f"u has shape {u.shape}, gate has {self.n} components")
        u = np.clip(u, U_EPS, 1.0 - U_EPS)
        return T.hard_concrete_sample(self.alpha, u, self.l, self.r, self.beta)

    def open_probability(self) -> Tensor:
        """P(z_j > 0) = sigmoid(alpha_j - beta*log(-l/r)), differentiable."""
        shift = -self.beta * math.log(-self.l / self.r)
        return T.sigmoid(T.add(self.alpha, shift))

    def expected_l0(self) -> Tensor:
        """Expected surviving parameter count, weighted by block sizes."""
        w = Tensor(self.block_sizes.astype(self.alpha.data.dtype))
        return T.sum_all(T.mul(self.open_probability(), w))

    # ----------------------------------------------------------- inference

    def open_probability_values(self) -> np.ndarray:
        shift = -self.beta * math.log(-self.l / self.r)
        return 1.0 / (1.0 + np.exp(-(self.alpha.data + shift)))

    def expected_l0_value(self) -> float:
        return float(np.sum(self.open_probability_values() * self.block_sizes))

    def deterministic_mask(self, keep_count: int):
        """Top keep_count components by open probability (ties: lower index).

        Returns (kept indices ascending, full-length value vector with
        zeros at dropped positions).
        """
        if not 0 <= keep_count <= self.n:
            raise ValueError(f"keep_count {keep_count} out of range [0, {self.n}]")
        p = self.open_probability_values()
        order = np.argsort(-p, kind="stable")
        kept = np.sort(order[:keep_count])
        values = np.zeros(self.n, dtype=self.alpha.data.dtype)
        if keep_count:
            if self.kept_value_mode == "one":
                values[kept] = 1.0
            elif self.kept_value_mode == "open_prob":
                values[kept] = p[kept]
            else:
                s = 1.0 / (1.0 + np.exp(-self.alpha.data[kept] / self.beta))
                values[kept] = np.clip(s * (self.r - self.l) + self.l, 0.0, 1.0)
        return kept, values

    def compute_keep_count(self) -> int:
        """Number of components whose total size matches the expected L0."""
        p = self.open_probability_values()
        sizes = self.block_sizes
        if np.all(sizes == sizes[0]):
            return int(np.clip(math.floor(np.sum(p) + 0.5), 0, self.n))
        budget = float(np.sum(p * sizes))
        order = np.argsort(-p, kind="stable")
        total = 0.0
        for k, j in enumerate(order, start=1):
            total += sizes[j]
            if total >= budget:
                return k
        return self.n

    def inference_mask(self):
        return self.deterministic_mask(self.compute_keep_count())

    # ------------------------------------------------------- serialization

    def state(self):
        return {
            "alpha": self.alpha.data,
            "l": self.l,
            "r": self.r,
            "beta": self.beta,
            "block_sizes": self.block_sizes,
            "kept_value_mode": self.kept_value_mode,
        }


class PlainMask:
    """Learnable diagonal mask for magnitude-schedule pruning.

    No stochastic relaxation: g starts at 1, an L1 penalty shrinks it,
    and the schedule hard-zeroes the smallest entries for good. Frozen
    entries never revive.
    """

    def __init__(self, n=None, block_sizes=None, init=1.0, dtype=None):
        if block_sizes is None:
            if n is None:
                raise ValueError("need n or block_sizes")
            block_sizes = np.ones(n, dtype=np.int64)
        self.block_sizes = np.asarray(block_sizes, dtype=np.int64)
        n = self.block_sizes.shape[0]
        self.g = Tensor(np.full(n, float(init), dtype=dtype or T.default_dtype()),
                        requires_grad=True, name="mask")
        self.frozen = np.zeros(n, dtype=bool)

    @property
    def n(self):
        return self.block_sizes.shape[0]

    def mask_tensor(self) -> Tensor:
        return self.g

    def enforce_frozen(self):
        """Re-zero pruned entries; call after every optimizer step."""
        if self.frozen.any():
            self.g.data[self.frozen] = 0.0

    def l1_penalty(self) -> Tensor:
        return T.sum_all(T.absval(self.g))

    def expected_l0_value(self) -> float:
        return float(np.sum((~self.frozen) * self.block_sizes))

    def compute_keep_count(self) -> int:
        return int(np.sum(~self.frozen))

    def inference_mask(self):
        kept = np.where(~self.frozen)[0]
        values = np.zeros(self.n, dtype=self.g.data.dtype)
        values[kept] = self.g.data[kept]
        return kept, values

    def state(self):
        return {"g": self.g.data, "frozen": self.frozen, "block_sizes": self.block_sizes}
