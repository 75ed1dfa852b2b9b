"""Unit tests for optimizers and schedules."""

import numpy as np
import pytest

from xdops import optim
from xdops.autodiff import Tensor


def _quadratic_grads(params):
    return {p: 2.0 * p.data for p in params}


class TestSGD:
    def test_descends_quadratic(self):
        p = Tensor(np.array([4.0, -2.0]), requires_grad=True)
        for _ in range(200):
            optim.sgd_step([p], _quadratic_grads([p]), lr=0.1)
        np.testing.assert_allclose(p.data, [0.0, 0.0], atol=1e-12)

    def test_missing_grad_is_zero(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        optim.sgd_step([p], {}, lr=0.5)
        np.testing.assert_allclose(p.data, [1.0])

    def test_negative_lr_rejected(self):
        with pytest.raises(ValueError):
            optim.sgd_step([], {}, lr=-1.0)


class TestMomentum:
    def test_matches_manual_recurrence(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = {}
        x, v = 1.0, 0.0
        for _ in range(5):
            g = {p: 2.0 * p.data}
            optim.momentum_step([p], g, lr=0.1, mu=0.9, state=state)
            v = 0.9 * v + 2.0 * x
            x = x - 0.1 * v
            np.testing.assert_allclose(p.data, [x], rtol=1e-14)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = Tensor(np.array([10.0, -3.0]), requires_grad=True)
        optim.adam_step([p], {p: np.array([5.0, -0.1])}, lr=1e-2,
                       beta1=0.9, beta2=0.999, eps=0.0, state={})
        np.testing.assert_allclose(p.data, [10.0 - 1e-2, -3.0 + 1e-2], rtol=1e-9)

    def test_complex_planes_independent(self):
        """A purely imaginary gradient must not touch the real plane."""
        p = Tensor(np.array([1.0 + 1.0j]), requires_grad=True)
        optim.adam_step([p], {p: np.array([0.0 + 2.0j])}, lr=1e-2,
                       beta1=0.9, beta2=0.999, eps=1e-8, state={})
        assert p.data[0].real == 1.0
        assert p.data[0].imag < 1.0

    def test_converges_quadratic(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        opt = optim.Adam([p], lr=0.1)
        for _ in range(500):
            opt.step({p: 2.0 * p.data})
        np.testing.assert_allclose(p.data, [0.0], atol=1e-4)


class TestGradValidation:
    def test_nan_grad_rejects_whole_step(self):
        p1 = Tensor(np.array([1.0]), requires_grad=True)
        p2 = Tensor(np.array([2.0]), requires_grad=True)
        with pytest.raises(optim.OptimError):
            optim.sgd_step([p1, p2], {p1: np.array([1.0]), p2: np.array([np.nan])}, lr=0.1)
        np.testing.assert_allclose(p1.data, [1.0])  # nothing mutated

    def test_complex_nan_detected(self):
        p = Tensor(np.array([1.0 + 0j]), requires_grad=True)
        with pytest.raises(optim.OptimError):
            optim.adam_step([p], {p: np.array([1.0 + 1j * np.inf])}, lr=0.1,
                            beta1=0.9, beta2=0.999, eps=1e-8, state={})


class TestFactory:
    def test_make_optimizer(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        assert isinstance(optim.make_optimizer({"algo": "sgd", "lr": 0.1}, [p]), optim.SGD)
        mom = optim.make_optimizer({"algo": "momentum", "lr": 0.1, "momentum": 0.5}, [p])
        assert isinstance(mom, optim.Momentum) and mom.mu == 0.5
        adam = optim.make_optimizer({"algo": "adam", "lr": 0.1, "beta2": 0.99}, [p])
        assert isinstance(adam, optim.Adam) and adam.beta2 == 0.99
        with pytest.raises(ValueError):
            optim.make_optimizer({"algo": "lbfgs"}, [p])

    def test_set_lr_factor(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = optim.SGD([p], lr=0.4)
        opt.set_lr_factor(0.25)
        assert opt.lr == pytest.approx(0.1)
        opt.set_lr_factor(1.0)
        assert opt.lr == pytest.approx(0.4)


class TestSchedules:
    def test_constant(self):
        f = optim.make_schedule("constant")
        assert f(0, 10) == f(9, 10) == 1.0

    def test_cosine_endpoints(self):
        f = optim.make_schedule("cosine")
        assert f(0, 100) == pytest.approx(1.0)
        assert f(99, 100) == pytest.approx(0.0, abs=1e-12)
        assert 0.0 < f(50, 100) < 1.0

    def test_step(self):
        f = optim.make_schedule({"kind": "step", "milestones": [5, 8], "gamma": 0.1})
        assert f(4, 10) == 1.0
        assert f(5, 10) == pytest.approx(0.1)
        assert f(9, 10) == pytest.approx(0.01)

    def test_unknown(self):
        with pytest.raises(ValueError):
            optim.make_schedule("polynomial")
