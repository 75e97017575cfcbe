import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorprune import tensor as T
from factorprune.controller import (
    AgpScheduler,
    LagrangianController,
    agp_prune_step,
    linear_ramp,
)
from factorprune.gates import HardConcreteGate, PlainMask
from factorprune.gradcheck import check_gradients
from factorprune.optim import SGD
from factorprune.tensor import Graph, Tensor


def raw_controller(prunable=1.0, target=0.0, m=1, lr=1.0):
    return LagrangianController(prunable_total=prunable, target_kept=target,
                                m=m, lr_lambda=lr, normalize=False)


class TestTargetSchedule:
    def test_halfway_removal(self):
        # removal target 0.3 of a unit pool, k=2 of m=4 -> 0.15 removed
        ctrl = raw_controller(prunable=1.0, target=0.7, m=4)
        assert ctrl.scheduled_removal(2) == pytest.approx(0.15)
        assert ctrl.target_size(2) == pytest.approx(0.85)

    def test_saturation(self):
        ctrl = raw_controller(prunable=100.0, target=40.0, m=10)
        for k in (10, 11, 1000):
            assert ctrl.target_size(k) == 40.0

    def test_zero_step_full_size(self):
        ctrl = raw_controller(prunable=100.0, target=40.0, m=10)
        assert ctrl.target_size(0) == 100.0

    def test_ramp_exactness_random_triples(self, rng):
        for _ in range(1000):
            k = int(rng.integers(0, 10_000))
            m = int(rng.integers(1, 5_000))
            t_max = float(rng.uniform(0, 1e6))
            expected = t_max if k >= m else (k / m) * t_max
            assert linear_ramp(k, m, t_max) == expected

    def test_piecewise_linear_and_continuous(self):
        ctrl = raw_controller(prunable=50.0, target=20.0, m=100)
        ts = np.array([ctrl.target_size(k) for k in range(300)])
        steps = np.diff(ts)
        assert np.all(steps[:99] < 0)
        assert np.allclose(steps[:99], steps[0])
        assert np.all(ts[100:] == 20.0)

    @given(st.integers(0, 10**6), st.integers(1, 10**6), st.floats(0, 1e9))
    @settings(max_examples=200, deadline=None)
    def test_ramp_bounds(self, k, m, t_max):
        v = linear_ramp(k, m, t_max)
        assert 0.0 <= v <= t_max


class TestPenalty:
    def test_zero_when_satisfied(self):
        ctrl = raw_controller(prunable=10.0, target=10.0, m=1, lr=1.0)
        ctrl.lambda1, ctrl.lambda2 = 3.0, 7.0
        ctrl.k = 5
        g = ctrl.penalty(Tensor(np.asarray(10.0)))
        assert float(g.data) == 0.0

    def test_arithmetic_overshoot_and_undershoot(self):
        ctrl = raw_controller(prunable=1.0, target=0.0, m=1)
        ctrl.k = 1  # schedule saturated: t = 0
        ctrl.lambda1, ctrl.lambda2 = 2.0, 4.0
        up = ctrl.penalty(Tensor(np.asarray(0.1)))
        assert float(up.data) == pytest.approx(0.24)
        down = ctrl.penalty(Tensor(np.asarray(-0.1)))
        assert float(down.data) == pytest.approx(-0.16)

    def test_gradient_chain_rule_identity(self, rng):
        # d penalty/d alpha = (l1 + 2*l2*(s-t)) * ds/dalpha
        gate = HardConcreteGate(n=4, block_sizes=[2, 3, 4, 5])
        gate.alpha.data[:] = rng.standard_normal(4)
        ctrl = raw_controller(prunable=14.0, target=7.0, m=1, lr=1.0)
        ctrl.k = 1
        ctrl.lambda1, ctrl.lambda2 = 0.8, 1.7

        def build():
            return ctrl.penalty(gate.expected_l0())

        report = check_gradients(build, {"alpha": gate.alpha}, tol=1e-6)
        assert report.passed, str(report)

        with Graph() as g:
            s = gate.expected_l0()
            g.backward(ctrl.penalty(s))
        grad_pen = gate.alpha.grad.copy()
        gate.alpha.zero_grad()
        with Graph() as g:
            g.backward(gate.expected_l0())
        ds = gate.alpha.grad.copy()
        s_val = gate.expected_l0_value()
        factor = ctrl.lambda1 + 2 * ctrl.lambda2 * (s_val - ctrl.target_size())
        assert np.allclose(grad_pen, factor * ds, rtol=1e-12)


class TestMultipliers:
    def test_unchanged_when_satisfied(self):
        ctrl = raw_controller(prunable=10.0, target=10.0, m=1, lr=0.5)
        ctrl.update_multipliers(10.0)
        assert ctrl.lambda1 == 0.0 and ctrl.lambda2 == 0.0

    def test_single_step_values(self):
        ctrl = raw_controller(prunable=1.0, target=0.0, m=1, lr=0.1)
        ctrl.k = 1
        ctrl.update_multipliers(0.5)
        assert ctrl.lambda1 == pytest.approx(0.05)
        assert ctrl.lambda2 == pytest.approx(0.025)

    def test_constant_violation_doubles_lambda1(self):
        ctrl = raw_controller(prunable=1.0, target=0.0, m=1, lr=0.1)
        ctrl.k = 1
        ctrl.update_multipliers(0.5)
        first = ctrl.lambda1
        ctrl.update_multipliers(0.5)
        assert ctrl.lambda1 == pytest.approx(2 * first)

    def test_lambda2_never_negative(self, rng):
        ctrl = raw_controller(prunable=10.0, target=5.0, m=3, lr=0.7)
        for s in rng.uniform(0, 10, 200):
            ctrl.update_multipliers(float(s))
            assert ctrl.lambda2 >= 0.0

    def test_k_starts_at_zero_and_multipliers_at_zero(self):
        ctrl = raw_controller()
        assert ctrl.k == 0 and ctrl.lambda1 == 0.0 and ctrl.lambda2 == 0.0


class TestClosedLoopToy:
    def test_drives_expected_size_to_target(self):
        # frozen theta: only the gates and multipliers move; the loop must
        # land within 2% of target inside 2000 steps
        rng = np.random.default_rng(0)
        gate = HardConcreteGate(n=200, alpha_init=2.2,
                                block_sizes=np.full(200, 10))
        prunable = 2000.0
        target = 1000.0
        ctrl = LagrangianController(prunable_total=prunable, target_kept=target,
                                    m=400, lr_lambda=1.0, normalize=True)
        opt = SGD([(gate.alpha, 1.0)], lr=0.3, momentum=0.0)
        for _ in range(2000):
            with Graph() as g:
                s = gate.expected_l0()
                g.backward(ctrl.penalty(s))
            opt.step()
            opt.zero_grad()
            ctrl.update_multipliers(float(s.data))
        final = gate.expected_l0_value()
        assert abs(final - target) / target < 0.02


class TestAgpSchedule:
    def test_begin_and_end(self):
        sched = AgpScheduler(final_sparsity=0.8, begin_step=10, end_step=110)
        assert sched.sparsity(10) == 0.0
        assert sched.sparsity(110) == 0.8
        assert sched.sparsity(0) == 0.0
        assert sched.sparsity(10_000) == 0.8

    def test_midpoint_cubic(self):
        sched = AgpScheduler(final_sparsity=0.8, begin_step=0, end_step=100)
        assert sched.sparsity(50) == pytest.approx(0.8 * (1 - 0.125))

    def test_monotone_nondecreasing(self):
        sched = AgpScheduler(final_sparsity=0.9, begin_step=5, end_step=205,
                             prune_frequency=10)
        vals = [sched.sparsity(s) for s in range(250)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


class _MaskModel:
    """Minimal stand-in exposing gated_layers() for the AGP pruner."""

    def __init__(self, masks):
        self._layers = [(f"m{i}", _MaskLayer(m)) for i, m in enumerate(masks)]

    def gated_layers(self):
        return self._layers


class _MaskLayer:
    def __init__(self, mask):
        self.gate = mask
        self.clusters = None

    def __getattr__(self, item):
        raise AttributeError(item)


def make_mask_model(value_lists):
    masks = []
    for values in value_lists:
        m = PlainMask(n=len(values))
        m.g.data[:] = values
        masks.append(m)
    return _MaskModel(masks), masks


class TestAgpPrune:
    def test_zero_sparsity_no_change(self):
        model, masks = make_mask_model([[0.5, 0.3]])
        sched = AgpScheduler(final_sparsity=0.5, begin_step=10, end_step=20)
        achieved, _ = agp_prune_step(model, sched, step=0)
        assert achieved == 0.0
        assert not masks[0].frozen.any()

    def test_magnitude_ranking(self):
        model, masks = make_mask_model([[0.5, -0.01, 0.3]])
        sched = AgpScheduler(final_sparsity=1 / 3, begin_step=0, end_step=1)
        agp_prune_step(model, sched, step=1)
        assert list(masks[0].frozen) == [False, True, False]
        assert masks[0].g.data[1] == 0.0

    def test_full_sparsity_zeroes_all(self):
        model, masks = make_mask_model([[0.5, 0.2], [0.9, -0.4]])
        sched = AgpScheduler(final_sparsity=1.0, begin_step=0, end_step=1)
        agp_prune_step(model, sched, step=1)
        assert all(m.frozen.all() for m in masks)

    def test_zeroed_set_is_monotone_subset(self, rng):
        model, masks = make_mask_model([list(rng.standard_normal(20))])
        sched = AgpScheduler(final_sparsity=0.9, begin_step=0, end_step=100,
                             prune_frequency=10)
        prev = set()
        for step in range(0, 101, 10):
            agp_prune_step(model, sched, step)
            now = set(np.flatnonzero(masks[0].frozen))
            assert prev <= now
            prev = now
            # surviving masks drift as training would move them
            alive = ~masks[0].frozen
            masks[0].g.data[alive] += rng.standard_normal(alive.sum()) * 0.05
        assert len(prev) == 18  # 90% of 20
