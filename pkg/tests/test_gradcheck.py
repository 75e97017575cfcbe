import numpy as np

from conftest import safe_uniforms
from factorprune import tensor as T
from factorprune.gates import HardConcreteGate
from factorprune.gradcheck import check_gradients
from factorprune.tensor import Tensor


def test_linear_layer_passes_tight_tolerance(rng):
    x = Tensor(rng.standard_normal((3, 5)))
    W = Tensor(rng.standard_normal((4, 5)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    tgt = rng.standard_normal((3, 4))

    def build():
        y = T.add_bias(T.matmul(x, T.transpose(W)), b)
        d = T.sub(y, Tensor(tgt))
        return T.mean_all(T.mul(d, d))

    report = check_gradients(build, {"W": W, "b": b}, tol=1e-6)
    assert report.passed, str(report)


def test_gated_layer_passes_with_injected_noise(rng):
    x = Tensor(rng.standard_normal((2, 6)))
    P = Tensor(rng.standard_normal((5, 4)) * 0.5, requires_grad=True)
    Q = Tensor(rng.standard_normal((4, 6)) * 0.5, requires_grad=True)
    gate = HardConcreteGate(n=4, alpha_init=0.2)
    u = safe_uniforms(rng, 4)

    def build():
        z = gate.sample_mask(u)
        h = T.scale_columns(T.matmul(x, T.transpose(Q)), z)
        y = T.matmul(h, T.transpose(P))
        return T.mean_all(T.mul(y, y))

    report = check_gradients(build, {"P": P, "Q": Q, "alpha": gate.alpha}, tol=1e-4)
    assert report.passed, str(report)


def test_saturated_gate_has_exactly_zero_gradient(rng):
    # z pinned at 1 (huge alpha): clamp region, analytic gradient must be 0,
    # and the one-sided numeric check agrees
    gate = HardConcreteGate(n=3, alpha_init=12.0)
    u = np.full(3, 0.5)
    w = rng.standard_normal(3)

    with T.Graph() as g:
        z = gate.sample_mask(u)
        g.backward(T.sum_all(T.mul(z, Tensor(w))))
    assert np.array_equal(gate.alpha.grad, np.zeros(3))

    eps = 1e-5
    for i in range(3):
        orig = gate.alpha.data[i]
        gate.alpha.data[i] = orig + eps
        up = float(np.sum(gate.sample_mask(u).data * w))
        gate.alpha.data[i] = orig
        here = float(np.sum(gate.sample_mask(u).data * w))
        assert up == here  # flat on the saturated side


def test_failures_reported_not_thrown(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)

    def build():
        return T.sum_all(T.mul(x, x))

    report = check_gradients(build, {"x": x}, tol=1e-30)  # unreachable tolerance
    assert not report.passed
    assert len(report.failures()) == 1
    assert "FAIL" in str(report)
