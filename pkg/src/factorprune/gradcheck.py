"""Central finite-difference verification of tape gradients.

The builder re-evaluates the loss from current parameter values; any
randomness must be injected (frozen u for the gates) so both evaluations
of f(theta +/- eps) see the same noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Graph, Tensor, no_grad


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    max_abs_err: float
    passed: bool
    worst_index: int = -1


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        lines = [
            f"{'ok' if c.passed else 'FAIL':4s} {c.name:24s} rel={c.max_rel_err:.3e} abs={c.max_abs_err:.3e}"
            for c in self.checks
        ]
        return "\n".join(lines)


def _rel_err(a, n):
    return abs(a - n) / max(abs(a) + abs(n), 1e-8)


def check_gradients(build, params, eps=1e-5, tol=1e-6) -> GradCheckReport:
    """Compare tape gradients of build() against central differences.

    build: () -> scalar loss Tensor, evaluated fresh on each call.
    params: dict name -> Tensor (requires_grad) perturbed one entry at a time.
    Failures are recorded in the report, never raised.
    """
    report = GradCheckReport(eps=eps, tol=tol)

    for t in params.values():
        t.zero_grad()
    with Graph() as g:
        loss = build()
        g.backward(loss)
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for k, t in params.items()}
    for t in params.values():
        t.zero_grad()

    def eval_loss():
        with no_grad():
            return float(build().data)

    for name, t in params.items():
        flat = t.data.reshape(-1)
        a = analytic[name].reshape(-1)
        max_rel = 0.0
        max_abs = 0.0
        worst = -1
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + eps
            up = eval_loss()
            flat[i] = orig - eps
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            rel = _rel_err(a[i], numeric)
            if rel > max_rel:
                max_rel = rel
                worst = i
            max_abs = max(max_abs, abs(a[i] - numeric))
        report.checks.append(
            ParamCheck(name=name, max_rel_err=max_rel, max_abs_err=max_abs,
                       passed=max_rel < tol, worst_index=worst)
        )
    return report
