"""Primitive-level tests: every op against a straight-line oracle, plus the
NaN policy and purity checks."""

import numpy as np
import pytest

from groupseg import ops
from groupseg.errors import NumericError, ShapeError
from groupseg.tensor import Rng, Tensor


def loop_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def loop_conv(x, kernel, stride, pad):
    h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for a in range(kh):
                for b in range(kw):
                    for c in range(cin):
                        for o in range(cout):
                            out[i, j, o] += xp[i * stride + a, j * stride + b, c] \
                                * kernel[a, b, c, o]
    return out


class TestLinear:
    def test_identity(self):
        y = ops.linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        assert np.array_equal(y.data, [[1.0, 2.0]])

    def test_arithmetic(self):
        y = ops.linear(Tensor([[1.0, 1.0]]), Tensor([[1.0], [1.0]]), Tensor([1.0]))
        assert np.array_equal(y.data, [[3.0]])

    def test_loop_oracle(self):
        rng = Rng(0)
        x, w, b = rng.normal((3, 4)), rng.normal((4, 2)), rng.normal((2,))
        y = ops.linear(Tensor(x), Tensor(w), Tensor(b))
        assert np.abs(y.data - (loop_matmul(x, w) + b)).max() < 1e-12

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))),
                       Tensor(np.zeros(2)))


class TestLayerNorm:
    def test_constant_row_collapses_to_beta(self):
        y = ops.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)),
                           Tensor(np.zeros(3)), eps=1e-6)
        assert np.abs(y.data).max() < 1e-9

    def test_already_normalized(self):
        y = ops.layer_norm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)),
                           Tensor(np.zeros(2)), eps=1e-12)
        assert np.abs(y.data - [[-1.0, 1.0]]).max() < 1e-10

    def test_formula_oracle(self):
        rng = Rng(1)
        x = rng.normal((5, 7))
        g, b = rng.normal((7,)), rng.normal((7,))
        y = ops.layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=1e-6)
        mu = x.mean(1, keepdims=True)
        var = x.var(1, keepdims=True)
        ref = g * (x - mu) / np.sqrt(var + 1e-6) + b
        assert np.abs(y.data - ref).max() < 1e-12

    def test_moment_invariant(self):
        rng = Rng(2)
        x = rng.normal((20, 9), std=3.0)
        y = ops.layer_norm(Tensor(x), Tensor(np.ones(9)), Tensor(np.zeros(9)), eps=1e-10)
        assert np.abs(y.data.mean(axis=1)).max() < 1e-10
        assert np.abs(y.data.var(axis=1) - 1).max() < 1e-8


class TestSoftmax:
    def test_symmetry(self):
        y = ops.softmax_rows(Tensor([[0.0, 0.0]]))
        assert np.array_equal(y.data, [[0.5, 0.5]])

    def test_analytic(self):
        y = ops.softmax_rows(Tensor([[0.0, np.log(2.0)]]))
        assert np.abs(y.data - [[1 / 3, 2 / 3]]).max() < 1e-12

    def test_max_shift_stability(self):
        y = ops.softmax_rows(Tensor([[1000.0, 0.0]]))
        assert np.isfinite(y.data).all()
        assert np.abs(y.data - [[1.0, 0.0]]).max() < 1e-12

    @pytest.mark.parametrize("scale", [1.0, 1e4, -1e4])
    def test_rows_sum_to_one_extreme(self, scale):
        rng = Rng(3)
        x = rng.normal((40, 11)) * scale
        y = ops.softmax_rows(Tensor(x))
        assert np.abs(y.data.sum(axis=1) - 1).max() < 1e-12


class TestConv:
    def test_identity_kernel_subsamples(self):
        x = Rng(4).normal((4, 4, 1))
        k = np.ones((1, 1, 1, 1))
        y = ops.strided_conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)), 2, 0)
        assert np.array_equal(y.data, x[::2, ::2])

    def test_all_ones(self):
        x = np.ones((4, 4, 1))
        k = np.ones((2, 2, 1, 1))
        y = ops.strided_conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)), 2, 0)
        assert np.array_equal(y.data, np.full((2, 2, 1), 4.0))

    def test_loop_oracle(self):
        rng = Rng(5)
        x, k, b = rng.normal((6, 5, 3)), rng.normal((3, 3, 3, 2)), rng.normal((2,))
        y = ops.strided_conv2d(Tensor(x), Tensor(k), Tensor(b), 2, 1)
        assert np.abs(y.data - (loop_conv(x, k, 2, 1) + b)).max() < 1e-12

    def test_bad_geometry(self):
        with pytest.raises(ShapeError):
            ops.strided_conv2d(Tensor(np.ones((2, 2, 1))), Tensor(np.ones((5, 5, 1, 1))),
                               Tensor(np.zeros(1)), 1, 0)


class TestNanPolicy:
    def test_overflow_aborts(self):
        big = Tensor(np.array([[1e308]]))
        with pytest.raises(NumericError):
            ops.mul(big, big)

    def test_masked_logits_stay_finite(self):
        logit = ops.add(Tensor(np.zeros((2, 2))), Tensor([[0.0, ops.NEG_MASK]] * 2))
        y = ops.softmax_rows(logit)
        assert y.data[0, 1] == 0.0  # exact zero through underflow


class TestMisc:
    def test_column_renorm_arithmetic(self):
        a = Tensor([[1.0, 0.0], [0.5, 0.5]])
        d = ops.column_renorm(a)
        assert np.abs(d.data - [[2 / 3, 0.0], [1 / 3, 1.0]]).max() < 1e-15

    def test_gather_rows(self):
        x = Tensor(np.arange(12.0).reshape(4, 3))
        y = ops.gather_rows(x, np.array([2, 0, 2]))
        assert np.array_equal(y.data, x.data[[2, 0, 2]])

    def test_upsample_bilinear_constant(self):
        x = Tensor(np.full((3, 3, 2), 7.0))
        y = ops.upsample_bilinear(x, 4)
        assert y.data.shape == (12, 12, 2)
        assert np.abs(y.data - 7.0).max() < 1e-12

    def test_purity_bit_identical(self):
        def run():
            rng = Rng(99)
            x = Tensor(rng.normal((8, 8)))
            return ops.softmax_rows(ops.linear(x, Tensor(rng.normal((8, 4))),
                                               Tensor(rng.normal((4,))))).data
        assert np.array_equal(run(), run())
