"""Unit tests for the reverse-mode autodiff engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdops import autodiff as ad
from xdops.autodiff import Tape, Tensor


def _scalarize(t):
    """Real scalar from any tensor, for loss construction."""
    if t.is_complex:
        t = ad.add(ad.real(t), ad.imag(t))
    return ad.sum_(t)


class TestTape:
    def test_single_use(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(ad.mul(x, x))
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="already consumed"):
            tape.backward(loss)

    def test_scalar_loss_required(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)

    def test_complex_loss_rejected(self):
        x = Tensor(np.array([1.0 + 1j]), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(x)
        with pytest.raises(ValueError, match="complex"):
            tape.backward(loss)

    def test_no_tape_no_tracking(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = ad.mul(x, x)
        assert not y._tracked

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(ad.add(ad.mul(x, x), x))  # x^2 + x
        g = tape.backward(loss)[x]
        np.testing.assert_allclose(g, [7.0])


class TestPrimitiveGradients:
    """Every primitive checked against central finite differences."""

    def _check(self, fn, point, tol=1e-6):
        report = ad.grad_check(fn, point, h=1e-5)
        assert report.max_error < tol, report.per_parameter

    def test_add_sub_mul_broadcast(self):
        rng = np.random.default_rng(0)
        point = {
            "a": Tensor(rng.standard_normal((3, 4))),
            "b": Tensor(rng.standard_normal((1, 4))),
        }
        self._check(lambda p: ad.sum_(ad.mul(ad.add(p["a"], p["b"]),
                                             ad.sub(p["a"], p["b"]))), point)

    def test_mul_complex(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal(5) + 1j * rng.standard_normal(5)
        w = rng.standard_normal(5) + 1j * rng.standard_normal(5)
        point = {"z": Tensor(z), "w": Tensor(w)}
        self._check(lambda p: _scalarize(ad.mul(p["z"], p["w"])), point)

    def test_matmul(self):
        rng = np.random.default_rng(2)
        point = {"a": Tensor(rng.standard_normal((3, 4))),
                 "b": Tensor(rng.standard_normal((4, 2)))}
        self._check(lambda p: ad.sum_(ad.mul(ad.matmul(p["a"], p["b"]),
                                             ad.matmul(p["a"], p["b"]))), point)

    def test_gather_with_duplicates(self):
        point = {"x": Tensor(np.arange(6.0))}
        idx = np.array([0, 0, 3, 5, 5, 5])
        self._check(lambda p: ad.sum_(ad.mul(ad.gather(p["x"], idx),
                                             Tensor(np.arange(1.0, 7.0)))), point)

    def test_zero_pad(self):
        point = {"x": Tensor(np.arange(4.0))}
        self._check(lambda p: ad.sum_(ad.mul(ad.zero_pad(p["x"], 0, 2, 3),
                                             Tensor(np.arange(9.0)))), point)

    def test_reshape_moveaxis(self):
        rng = np.random.default_rng(3)
        point = {"x": Tensor(rng.standard_normal((2, 3, 4)))}
        w = Tensor(rng.standard_normal((3, 2, 4)))
        self._check(lambda p: ad.sum_(ad.mul(
            ad.moveaxis(ad.reshape(p["x"], (4, 3, 2)), 0, 2), w)), point)

    def test_real_imag_to_complex_roundtrip(self):
        rng = np.random.default_rng(4)
        point = {"re": Tensor(rng.standard_normal(5)),
                 "im": Tensor(rng.standard_normal(5))}

        def fn(p):
            z = ad.to_complex(p["re"], p["im"])
            z = ad.mul(z, Tensor(np.array(1.5 - 0.5j)))
            return ad.add(ad.sum_(ad.real(z)), ad.sum_(ad.mul(ad.imag(z), ad.imag(z))))

        self._check(fn, point)

    def test_real_input_complex_graph(self):
        """A real leaf used in a complex computation gets a real gradient."""
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            z = ad.mul(ad.to_complex(x), Tensor(np.array([1j, 1j])))
            loss = ad.sum_(ad.imag(z))
        g = tape.backward(loss)[x]
        assert not np.iscomplexobj(g)
        np.testing.assert_allclose(g, [1.0, 1.0])

    def test_reciprocal(self):
        point = {"x": Tensor(np.array([0.5, 2.0, -4.0]))}
        self._check(lambda p: ad.sum_(ad.mul(ad.reciprocal(p["x"]),
                                             Tensor(np.array([1.0, 2.0, 3.0])))),
                    point)

    def test_sqrt_relu(self):
        point = {"x": Tensor(np.array([0.5, 2.0, 4.0, -1.0]))}
        self._check(lambda p: ad.sum_(ad.add(ad.sqrt(ad.relu(p["x"])), ad.relu(p["x"]))),
                    point)

    def test_losses(self):
        rng = np.random.default_rng(5)
        pred = rng.standard_normal((4, 6))
        tgt = rng.standard_normal((4, 6))
        self._check(lambda p: ad.mse(p["pred"], Tensor(tgt)), {"pred": Tensor(pred)})
        self._check(lambda p: ad.rel_l2(p["pred"], Tensor(tgt)), {"pred": Tensor(pred)})
        labels = np.array([0, 2, 1, 5])
        self._check(lambda p: ad.softmax_cross_entropy(p["pred"], labels),
                    {"pred": Tensor(pred)})

    def test_rel_l2_zero_target_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            ad.rel_l2(Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 3))))

    def test_butterfly_stage_real(self):
        rng = np.random.default_rng(6)
        nb, half = 2, 2
        point = {k: Tensor(rng.standard_normal((nb, half))) for k in "abcd"}
        point["x"] = Tensor(rng.standard_normal((3, 8)))
        w = Tensor(rng.standard_normal((3, 8)))
        self._check(lambda p: ad.sum_(ad.mul(
            ad.butterfly_stage(p["x"], p["a"], p["b"], p["c"], p["d"], axis=1, block=4),
            w)), point)

    def test_butterfly_stage_complex(self):
        rng = np.random.default_rng(7)
        nb, half = 1, 4

        def cplx(shape):
            return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)

        point = {k: Tensor(cplx((nb, half))) for k in "abcd"}
        point["x"] = Tensor(cplx((8,)))
        w = Tensor(cplx((8,)))
        self._check(lambda p: _scalarize(ad.mul(
            ad.butterfly_stage(p["x"], p["a"], p["b"], p["c"], p["d"], axis=0, block=8),
            w)), point)


class TestButterflyStageForward:
    def test_matches_dense(self):
        rng = np.random.default_rng(8)
        n, block = 8, 4
        nb, half = n // block, block // 2
        a, b, c, d = (rng.standard_normal((nb, half)) + 1j * rng.standard_normal((nb, half))
                      for _ in range(4))
        x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        y = ad.butterfly_stage(Tensor(x), a, b, c, d, axis=0, block=block).data
        dense = np.zeros((n, n), complex)
        for blk in range(nb):
            for j in range(half):
                t, bo = blk * block + j, blk * block + half + j
                dense[t, t] = a[blk, j]
                dense[t, bo] = b[blk, j]
                dense[bo, t] = c[blk, j]
                dense[bo, bo] = d[blk, j]
        np.testing.assert_allclose(y, dense @ x, atol=1e-13)

    def test_bad_block(self):
        with pytest.raises(ValueError):
            ad.butterfly_stage(Tensor(np.zeros(6)), np.ones((1, 2)), np.zeros((1, 2)),
                               np.zeros((1, 2)), np.ones((1, 2)), axis=0, block=4)


class TestGradCheckHarness:
    def test_bad_h(self):
        with pytest.raises(ValueError):
            ad.grad_check(lambda p: ad.sum_(p["x"]), {"x": Tensor(np.ones(2))}, h=0.0)

    def test_report_max_error(self):
        rep = ad.GradReport(per_parameter={"a": 1e-9, "b": 3e-8}, h=1e-5)
        assert rep.max_error == 3e-8

    def test_report_rejects_nonfinite(self):
        with pytest.raises(ad.GradCheckError):
            ad.GradReport(per_parameter={"a": float("nan")}, h=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_chain_gradcheck_random(rows, cols, seed):
    rng = np.random.default_rng(seed)
    point = {"w": Tensor(rng.standard_normal((rows, cols))),
             "v": Tensor(rng.standard_normal((rows, cols)))}
    tgt = Tensor(rng.standard_normal((rows, cols)))
    rep = ad.grad_check(
        lambda p: ad.mse(ad.add(ad.mul(p["w"], p["v"]), p["w"]), tgt), point)
    assert rep.max_error < 1e-6
