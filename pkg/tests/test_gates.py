import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorprune import tensor as T
from factorprune.gates import HardConcreteGate, PlainMask
from factorprune.gradcheck import check_gradients
from factorprune.tensor import DimensionError


def gate_with_probs(probs, block_sizes=None):
    """Gate whose open probabilities are exactly `probs` (defaults l,r,beta)."""
    probs = np.asarray(probs, dtype=float)
    shift = math.log(11.0)  # -beta*log(-l/r) for l=-0.1, r=1.1, beta=1
    alpha = np.log(probs / (1 - probs)) - shift
    g = HardConcreteGate(n=len(probs), block_sizes=block_sizes)
    g.alpha.data[:] = alpha
    return g


class TestSampling:
    def test_midpoint_noise(self):
        g = HardConcreteGate(n=1, alpha_init=0.0)
        z = g.sample_mask([0.5])
        assert z.data[0] == pytest.approx(0.5, abs=1e-12)

    def test_high_noise_stretched(self):
        g = HardConcreteGate(n=1, alpha_init=0.0)
        z = g.sample_mask([0.9])
        assert z.data[0] == pytest.approx(0.98, abs=1e-12)

    def test_low_noise_rectified_to_zero(self):
        g = HardConcreteGate(n=1, alpha_init=0.0)
        z = g.sample_mask([0.05])
        assert z.data[0] == 0.0

    def test_length_mismatch(self):
        g = HardConcreteGate(n=3)
        with pytest.raises(DimensionError):
            g.sample_mask([0.5, 0.5])

    def test_boundary_mass_both_ends(self):
        # at alpha=0 both exact 0 and exact 1 appear within 10k samples;
        # 10k iid components of one gate draw from the same distribution
        rng = np.random.default_rng(0)
        u = rng.uniform(0, 1, 10_000)
        big = HardConcreteGate(n=10_000, alpha_init=0.0)
        z = big.sample_mask(u).data
        assert np.any(z == 0.0)
        assert np.any(z == 1.0)

    @given(st.floats(-4, 4), st.floats(-4, 4), st.floats(0.02, 0.98))
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_alpha_for_fixed_noise(self, a1, a2, u):
        lo, hi = sorted((a1, a2))
        g = HardConcreteGate(n=2)
        g.alpha.data[:] = [lo, hi]
        z = g.sample_mask([u, u]).data
        assert z[0] <= z[1]


class TestOpenProbability:
    def test_closed_form_at_zero(self):
        g = HardConcreteGate(n=1, alpha_init=0.0)
        assert g.open_probability_values()[0] == pytest.approx(11 / 12, abs=1e-12)

    def test_limits(self):
        g = HardConcreteGate(n=2)
        g.alpha.data[:] = [-40.0, 40.0]
        p = g.open_probability_values()
        assert p[0] == pytest.approx(0.0, abs=1e-15)
        assert p[1] == pytest.approx(1.0, abs=1e-15)

    def test_monte_carlo_agreement(self):
        n_samples = 200_000
        rng = np.random.default_rng(42)
        for alpha in (-3.0, -1.0, 0.0, 1.0, 3.0):
            g = HardConcreteGate(n=n_samples, alpha_init=alpha)
            z = g.sample_mask(rng.uniform(0, 1, n_samples)).data
            frac = float(np.mean(z > 0))
            assert abs(frac - g.open_probability_values()[0]) < 0.005

    def test_monte_carlo_within_three_standard_errors(self):
        n = 200_000
        rng = np.random.default_rng(9)
        for alpha in (-5.0, -2.2, 0.7, 4.4):
            g = HardConcreteGate(n=n, alpha_init=alpha)
            z = g.sample_mask(rng.uniform(0, 1, n)).data
            p = g.open_probability_values()[0]
            se = math.sqrt(max(p * (1 - p), 1e-12) / n)
            assert abs(float(np.mean(z > 0)) - p) <= 3 * se + 1e-9


class TestExpectedL0:
    def test_weighted_blocks(self):
        g = gate_with_probs([0.5, 0.5], block_sizes=[10, 20])
        assert g.expected_l0_value() == pytest.approx(15.0, abs=1e-9)

    def test_fully_open(self):
        g = HardConcreteGate(n=3, block_sizes=[4, 5, 6])
        g.alpha.data[:] = 50.0
        assert g.expected_l0_value() == pytest.approx(15.0, abs=1e-12)

    def test_fully_closed(self):
        g = HardConcreteGate(n=3, block_sizes=[4, 5, 6])
        g.alpha.data[:] = -50.0
        assert g.expected_l0_value() == pytest.approx(0.0, abs=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        g = HardConcreteGate(n=5, block_sizes=[1, 2, 3, 4, 5])
        g.alpha.data[:] = rng.standard_normal(5)
        report = check_gradients(g.expected_l0, {"alpha": g.alpha}, tol=1e-6)
        assert report.passed, str(report)


class TestDeterministicMask:
    def test_saturated_open_keeps_all_at_one(self):
        g = HardConcreteGate(n=4, alpha_init=5.0)
        kept, values = g.deterministic_mask(4)
        assert list(kept) == [0, 1, 2, 3]
        assert np.array_equal(values, np.ones(4))

    def test_ranking_by_alpha(self):
        g = HardConcreteGate(n=3)
        g.alpha.data[:] = [2.0, -2.0, 0.0]
        kept, _ = g.deterministic_mask(1)
        assert list(kept) == [0]

    def test_kept_value_at_alpha_zero(self):
        g = HardConcreteGate(n=1, alpha_init=0.0)
        _, values = g.deterministic_mask(1)
        assert values[0] == pytest.approx(0.5, abs=1e-12)

    def test_keep_count_out_of_range(self):
        g = HardConcreteGate(n=3)
        with pytest.raises(ValueError):
            g.deterministic_mask(4)
        with pytest.raises(ValueError):
            g.deterministic_mask(-1)

    def test_tie_broken_by_lower_index(self):
        g = HardConcreteGate(n=3, alpha_init=1.0)
        kept, _ = g.deterministic_mask(2)
        assert list(kept) == [0, 1]

    def test_argtopk_invariance_under_monotone_transform(self, rng):
        # ranking by p equals ranking by any strictly increasing transform
        # of p; alpha itself is one such transform
        g = HardConcreteGate(n=8)
        g.alpha.data[:] = rng.standard_normal(8)
        kept, _ = g.deterministic_mask(3)
        by_alpha = np.sort(np.argsort(-g.alpha.data, kind="stable")[:3])
        assert np.array_equal(kept, by_alpha)

    def test_kept_value_modes(self):
        g = HardConcreteGate(n=2, alpha_init=0.0, kept_value_mode="one")
        _, values = g.deterministic_mask(2)
        assert np.array_equal(values, [1.0, 1.0])
        g2 = HardConcreteGate(n=1, alpha_init=0.0, kept_value_mode="open_prob")
        _, v2 = g2.deterministic_mask(1)
        assert v2[0] == pytest.approx(11 / 12, abs=1e-12)


class TestKeepCount:
    def test_rounding_uniform_blocks(self):
        g = gate_with_probs([0.99, 0.98, 0.01])
        assert g.compute_keep_count() == 2

    def test_all_open(self):
        g = HardConcreteGate(n=5, alpha_init=50.0)
        assert g.compute_keep_count() == 5

    def test_all_closed(self):
        g = HardConcreteGate(n=5, alpha_init=-50.0)
        assert g.compute_keep_count() == 0

    def test_nonuniform_blocks_budget(self):
        # budget = 0.5*10 + 0.5*30 = 20; top-1 block (p tie -> stable order)
        # has size 10 < 20, so k=2
        g = gate_with_probs([0.5, 0.5], block_sizes=[10, 30])
        assert g.compute_keep_count() == 2


class TestValidation:
    def test_stretch_constants(self):
        with pytest.raises(ValueError):
            HardConcreteGate(n=2, l=0.1, r=1.1)
        with pytest.raises(ValueError):
            HardConcreteGate(n=2, l=-0.1, r=0.9)

    def test_temperature(self):
        with pytest.raises(ValueError):
            HardConcreteGate(n=2, beta=0.0)

    def test_block_sizes_positive(self):
        with pytest.raises(ValueError):
            HardConcreteGate(block_sizes=[1, 0])

    def test_open_probability_in_unit_interval_and_monotone(self, rng):
        g = HardConcreteGate(n=64)
        g.alpha.data[:] = np.sort(rng.uniform(-30, 30, 64))
        p = g.open_probability_values()
        assert np.all((p > 0) & (p < 1))
        assert np.all(np.diff(p) >= 0)


class TestPlainMask:
    def test_freeze_is_permanent(self):
        m = PlainMask(n=4)
        m.frozen[2] = True
        m.g.data[:] = [0.5, 0.4, 0.3, 0.2]
        m.enforce_frozen()
        assert m.g.data[2] == 0.0
        kept, values = m.inference_mask()
        assert list(kept) == [0, 1, 3]
        assert values[2] == 0.0

    def test_l1_penalty_gradient(self):
        m = PlainMask(n=3)
        m.g.data[:] = [0.5, -0.2, 0.0]
        with T.Graph() as g:
            g.backward(m.l1_penalty())
        assert list(m.g.grad) == [1.0, -1.0, 0.0]
