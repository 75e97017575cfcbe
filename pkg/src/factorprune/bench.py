"""Inference speed benchmarks.

bench_compacted times y = P'(Q'x) for a factorized layer at several kept
ranks against the full rank, showing the structured-pruning speedup on
plain dense matmuls. bench_kernels compares the compiled elementwise
backend against the numpy fallback on the gate-sized workloads the
training loop runs.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - optional dependency
    threadpool_limits = None

from . import _slowops
from .backend import COMPILED, backend_name, kernels

UNSTABLE_SPREAD = 0.2  # relative IQR above this flags a noisy measurement


@dataclass
class BenchResult:
    d_out: int
    d_in: int
    r_full: int
    kept: int
    batch: int
    median_s: float
    spread: float
    trials: int
    speedup: float = 1.0
    unstable: bool = False

    def to_dict(self):
        return asdict(self)


def _time_once(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def _measure(fn, trials, warmup):
    for _ in range(warmup):
        fn()
    times = [_time_once(fn) for _ in range(trials)]
    times.sort()
    med = statistics.median(times)
    q1 = times[len(times) // 4]
    q3 = times[(3 * len(times)) // 4]
    spread = (q3 - q1) / med if med > 0 else 0.0
    return med, spread


def _limits(single_thread):
    if single_thread and threadpool_limits is not None:
        return threadpool_limits(limits=1)
    import contextlib

    return contextlib.nullcontext()


def bench_compacted(d_out, d_in, r_full, kept_ranks, batch=64, trials=30,
                    warmup=5, dtype="float32", seed=0, single_thread=True):
    """Median wall time of the two-matmul forward at each kept rank.

    Results are ordered [full rank, *kept_ranks]; speedups are relative
    to the full rank. A relative IQR above 20% of the median marks the
    row unstable (rerun on a quieter machine).
    """
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    x = rng.standard_normal((batch, d_in)).astype(dt)
    P = rng.standard_normal((d_out, r_full)).astype(dt)
    Q = rng.standard_normal((r_full, d_in)).astype(dt)
    results = []
    with _limits(single_thread):
        base_med, base_spread = _measure(lambda: (x @ Q.T) @ P.T, trials, warmup)
        results.append(BenchResult(d_out, d_in, r_full, r_full, batch,
                                   base_med, base_spread, trials, 1.0,
                                   base_spread > UNSTABLE_SPREAD))
        for k in kept_ranks:
            if not 0 < k <= r_full:
                raise ValueError(f"kept rank {k} out of range (0, {r_full}]")
            Pp = np.ascontiguousarray(P[:, :k])
            Qp = np.ascontiguousarray(Q[:k, :])
            med, spread = _measure(lambda: (x @ Qp.T) @ Pp.T, trials, warmup)
            results.append(BenchResult(d_out, d_in, r_full, k, batch, med, spread,
                                       trials, base_med / med,
                                       spread > UNSTABLE_SPREAD))
    return results


def render_bench_table(results) -> str:
    head = f"{'shape':>16s} {'rank':>6s} {'median ms':>10s} {'speedup':>8s} {'stable':>7s}"
    lines = [head, "-" * len(head)]
    for r in results:
        lines.append(
            f"{r.d_out:>7d}x{r.d_in:<8d} {r.kept:>6d} {r.median_s * 1e3:>10.3f} "
            f"{r.speedup:>7.2f}x {'no *' if r.unstable else 'yes':>7s}"
        )
    if any(r.unstable for r in results):
        lines.append("* unstable timing (IQR > 20% of median); rerun with a quiet CPU")
    return "\n".join(lines)


# ------------------------------------------------------- kernel backends

def _kernel_cases(n, rng):
    x = rng.standard_normal(n)
    y = 1.0 / (1.0 + np.exp(-x))
    g = rng.standard_normal(n)
    alpha = rng.standard_normal(n)
    u = rng.uniform(1e-6, 1 - 1e-6, n)
    return {
        "sigmoid": (lambda K: K.sigmoid(x)),
        "sigmoid_grad": (lambda K: K.sigmoid_grad(g, y)),
        "tanh": (lambda K: K.tanh(x)),
        "clamp": (lambda K: K.clamp(x, 0.0, 1.0)),
        "hc_sample": (lambda K: K.hc_sample(alpha, u, -0.1, 1.1, 1.0)),
    }


def bench_kernels(sizes=(512, 8192, 131072), trials=200, seed=0):
    """Compare the active backend against the numpy fallback per kernel.

    Returns rows {kernel, n, numpy_us, active_us, speedup, backend}.
    When the compiled backend is unavailable both columns time numpy.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        cases = _kernel_cases(n, rng)
        for name, call in cases.items():
            slow_med, _ = _measure(lambda: call(_slowops), trials, 5)
            fast_med, _ = _measure(lambda: call(kernels), trials, 5)
            rows.append({
                "kernel": name,
                "n": n,
                "numpy_us": slow_med * 1e6,
                "active_us": fast_med * 1e6,
                "speedup": slow_med / fast_med if fast_med > 0 else 0.0,
                "backend": backend_name(),
            })
    return rows


def render_kernel_table(rows) -> str:
    head = f"{'kernel':>14s} {'n':>8s} {'numpy us':>10s} {'active us':>10s} {'speedup':>8s}"
    lines = [f"active backend: {backend_name()}" +
             ("" if COMPILED else "  (compiled extension not built)"), head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['kernel']:>14s} {r['n']:>8d} {r['numpy_us']:>10.2f} "
            f"{r['active_us']:>10.2f} {r['speedup']:>7.2f}x"
        )
    return "\n".join(lines)
