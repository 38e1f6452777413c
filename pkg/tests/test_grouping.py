"""Grouping layer (dense reference path): mask geometry, iteration semantics
against an independent straight-line oracle, stochasticity, and locality."""

import numpy as np
import pytest

from groupseg import ops
from groupseg.errors import DegenerateColumnError, GeometryError
from groupseg.gradcheck import finite_diff_grad, max_rel_err, pick_indices
from groupseg.grouping import (TokenGrid, build_local_mask, dense_bias_index,
                               grouping_forward, grouping_init, grouping_iteration,
                               init_grouping_params)
from groupseg.tensor import Rng, Tape, Tensor


class TestLocalMask:
    def test_4x4_every_input_sees_whole_grid(self):
        m = build_local_mask(4, 4)
        assert np.all(m.valid.sum(axis=1) == 4)

    def test_8x8_examples(self):
        m = build_local_mask(8, 8)
        # input (0,0): parent (0,0), corner -> 4 permitted outputs
        nb = set(m.neighbors[0][m.valid[0]])
        assert nb == {0, 1, 4, 5}
        # input (3,3): parent (1,1), interior -> all 9 neighbors
        assert m.valid[3 * 8 + 3].sum() == 9

    def test_odd_dims_rejected(self):
        with pytest.raises(GeometryError):
            build_local_mask(5, 4)

    @pytest.mark.parametrize("hw", [(4, 4), (4, 8), (8, 6), (10, 10), (16, 12)])
    def test_double_count_identity(self, hw):
        m = build_local_mask(*hw)
        assert m.valid.sum() == m.contrib_valid.sum()
        assert np.all(m.valid.sum(axis=1) >= 1)
        assert np.all(m.contrib_valid.sum(axis=1) >= 1)

    def test_window_is_chebyshev_one_of_parent(self):
        m = build_local_mask(8, 8)
        for i in range(64):
            r, c = divmod(i, 8)
            pr, pc = r // 2, c // 2
            for s in range(9):
                if m.valid[i, s]:
                    orow, ocol = divmod(m.neighbors[i, s], 4)
                    assert max(abs(orow - pr), abs(ocol - pc)) <= 1


class TestGroupingInit:
    def test_shape_contract(self):
        p = init_grouping_params(Rng(0), d_in=2, mode="local")
        x = TokenGrid(Tensor(Rng(1).normal((16, 2))), 4, 4)
        y = grouping_init(x, p)
        assert (y.h, y.w, y.d) == (2, 2, 4)

    def test_zero_weights_zero_output(self):
        p = init_grouping_params(Rng(0), d_in=2, mode="local")
        p.conv_w.data = np.zeros_like(p.conv_w.data)
        x = TokenGrid(Tensor(Rng(1).normal((16, 2))), 4, 4)
        assert np.abs(grouping_init(x, p).tokens.data).max() < 1e-12

    def test_equals_manual_composition(self):
        p = init_grouping_params(Rng(3), d_in=3, mode="local")
        x = TokenGrid(Tensor(Rng(4).normal((36, 3))), 6, 6)
        y = grouping_init(x, p)
        conv = ops.strided_conv2d(ops.reshape(x.tokens, (6, 6, 3)),
                                  p.conv_w, p.conv_b, 2, 1)
        ref = ops.layer_norm(ops.reshape(conv, (9, 6)), p.ln_init_g, p.ln_init_b)
        assert np.array_equal(y.tokens.data, ref.data)

    def test_odd_dims_rejected(self):
        p = init_grouping_params(Rng(0), d_in=1, mode="local")
        with pytest.raises(GeometryError):
            grouping_init(TokenGrid(Tensor(np.zeros((3, 1))), 3, 1), p)


def oracle_iteration(x_in, x_out, p, mask_additive, bias_idx):
    """Independent straight-line recomputation with explicit dense matmuls."""
    k = x_in @ p.k_w.data + p.k_b.data
    q = x_out @ p.q_w.data + p.q_b.data
    tau = np.exp(p.log_tau.data)
    logits = tau * (k @ q.T) + p.bias_table.data[bias_idx] + mask_additive
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    ups = e / e.sum(axis=1, keepdims=True)
    down = ups / ups.sum(axis=0)
    v = x_in @ p.v_w.data + p.v_b.data
    upd = down.T @ v

    def ln(z, g, b):
        mu = z.mean(-1, keepdims=True)
        var = ((z - mu) ** 2).mean(-1, keepdims=True)
        return g * (z - mu) / np.sqrt(var + 1e-6) + b

    x1 = x_out + ln(upd, p.ln_upd_g.data, p.ln_upd_b.data)
    from scipy.special import erf
    h = x1 @ p.mlp_w1.data + p.mlp_b1.data
    h = 0.5 * h * (1 + erf(h / np.sqrt(2)))
    mlp = h @ p.mlp_w2.data + p.mlp_b2.data
    x2 = x1 + ln(mlp, p.ln_mlp_g.data, p.ln_mlp_b.data)
    return x2, ups, down


class TestGroupingIteration:
    def test_uniform_softmax_dense_2x2(self):
        """Zero q/k and B: dense 2x2 -> 1x1 gives a column of ones in a_ups
        and a_down entries all 1/4."""
        p = init_grouping_params(Rng(0), d_in=1, mode="dense", max_h_in=2, max_w_in=2)
        for name in ("k_w", "q_w", "bias_table"):
            p.tensors[name].data = np.zeros_like(p.tensors[name].data)
        x = TokenGrid(Tensor(Rng(1).normal((4, 1))), 2, 2)
        _, pair = grouping_forward(x, p)
        assert np.array_equal(pair.a_ups.data, np.ones((4, 1)))
        assert np.abs(pair.a_down.data - 0.25).max() < 1e-15

    def test_uniform_softmax_local(self):
        p = init_grouping_params(Rng(0), d_in=1, mode="local")
        for name in ("k_w", "q_w", "bias_table"):
            p.tensors[name].data = np.zeros_like(p.tensors[name].data)
        x = TokenGrid(Tensor(Rng(1).normal((64, 1))), 8, 8)
        _, pair = grouping_forward(x, p)
        m = build_local_mask(8, 8)
        counts = m.valid.sum(axis=1)
        got = pair.a_ups.data
        for i in range(64):  # every permitted entry equals 1/|permitted(i)|
            nz = got[i][got[i] > 0]
            assert nz.size == counts[i]
            assert np.abs(nz - 1.0 / counts[i]).max() < 1e-15

    def test_straight_line_oracle_8x8(self):
        rng = Rng(7)
        p = init_grouping_params(Rng(2), d_in=3, mode="local")
        x_in = TokenGrid(Tensor(rng.normal((64, 3))), 8, 8)
        x_out = grouping_init(x_in, p)
        m = build_local_mask(8, 8)
        got_grid, got_pair = grouping_iteration(x_in, x_out, p, m)
        ref_x, ref_ups, ref_down = oracle_iteration(
            x_in.tokens.data, x_out.tokens.data, p, m.additive(), m.bias_index())
        assert np.abs(got_grid.tokens.data - ref_x).max() < 1e-10
        assert np.abs(got_pair.a_ups.data - ref_ups).max() < 1e-10
        assert np.abs(got_pair.a_down.data - ref_down).max() < 1e-10

    def test_degenerate_column_errors(self):
        a = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        with pytest.raises(DegenerateColumnError):
            ops.column_renorm(a)


class TestGroupingForward:
    def test_l1_equals_init_plus_one_iteration(self):
        p = init_grouping_params(Rng(3), d_in=2, mode="local", iterations=1)
        x = TokenGrid(Tensor(Rng(4).normal((16, 2))), 4, 4)
        out, pair = grouping_forward(x, p)
        x0 = grouping_init(x, p)
        ref, ref_pair = grouping_iteration(x, x0, p, build_local_mask(4, 4))
        assert np.array_equal(out.tokens.data, ref.tokens.data)
        assert np.array_equal(pair.a_ups.data, ref_pair.a_ups.data)

    @pytest.mark.parametrize("trial", range(100))
    def test_locality_exact_zero_outside_mask(self, trial):
        rng = Rng(trial + 1000)
        hw = int(rng.integers(2, 7)) * 2
        p = init_grouping_params(Rng(trial), d_in=2, mode="local", iterations=1,
                                 init_std=0.2)
        x = TokenGrid(Tensor(rng.normal((hw * hw, 2), std=2.0)), hw, hw)
        _, pair = grouping_forward(x, p)
        m = build_local_mask(hw, hw)
        outside = pair.a_ups.data.copy()
        rows = np.broadcast_to(np.arange(hw * hw)[:, None], (hw * hw, 9))
        outside[rows[m.valid], m.neighbors[m.valid]] = 0.0
        assert outside.max() == 0.0 and outside.min() == 0.0

    def test_l3_unrolled_oracle(self):
        p = init_grouping_params(Rng(5), d_in=2, mode="local", iterations=3)
        rng = Rng(6)
        x = TokenGrid(Tensor(rng.normal((64, 2))), 8, 8)
        got, pair = grouping_forward(x, p)
        m = build_local_mask(8, 8)
        cur = grouping_init(x, p).tokens.data
        for _ in range(3):
            cur, ups, down = oracle_iteration(x.tokens.data, cur, p,
                                              m.additive(), m.bias_index())
        assert np.abs(got.tokens.data - cur).max() < 1e-9
        assert np.abs(pair.a_ups.data - ups).max() < 1e-9

    @pytest.mark.parametrize("mode,hw", [("local", 8), ("dense", 6)])
    def test_stochasticity(self, mode, hw):
        p = init_grouping_params(Rng(8), d_in=3, mode=mode, iterations=2,
                                 max_h_in=hw, max_w_in=hw)
        x = TokenGrid(Tensor(Rng(9).normal((hw * hw, 3))), hw, hw)
        _, pair = grouping_forward(x, p)
        assert np.abs(pair.a_ups.data.sum(axis=1) - 1).max() < 1e-9
        assert np.abs(pair.a_down.data.sum(axis=0) - 1).max() < 1e-9
        assert pair.a_ups.data.min() >= 0

    def test_channel_permutation_equivariance(self):
        """Permuting input channels together with the matching projection rows
        leaves the assignment unchanged: it depends on content, not order."""
        d = 4
        p = init_grouping_params(Rng(10), d_in=d, mode="local")
        rng = Rng(11)
        x = rng.normal((16, d))
        _, pair = grouping_forward(TokenGrid(Tensor(x), 4, 4), p)

        perm = Rng(12).permutation(d)
        p2 = init_grouping_params(Rng(10), d_in=d, mode="local")
        p2.k_w.data = p.k_w.data[perm]
        p2.v_w.data = p.v_w.data[perm]
        p2.conv_w.data = p.conv_w.data[:, :, perm, :]
        _, pair2 = grouping_forward(TokenGrid(Tensor(x[:, perm]), 4, 4), p2)
        assert np.abs(pair.a_ups.data - pair2.a_ups.data).max() < 1e-10

    def test_gradcheck_small_instances(self):
        """Gradient of a scalar loss through the full layer vs finite
        differences, both geometries of the spec'd instance sizes."""
        for hw, seed in ((4, 21), (8, 22)):
            p = init_grouping_params(Rng(seed), d_in=2, mode="local", iterations=2)
            rng = Rng(seed + 100)
            x = TokenGrid(Tensor(rng.normal((hw * hw, 2)), requires_grad=True), hw, hw)
            wv = rng.normal((4,))

            def run():
                out, _ = grouping_forward(x, p)
                return ops.sum_all(ops.mul(
                    out.tokens, Tensor(np.broadcast_to(wv, out.tokens.shape).copy())))
            params = [x.tokens] + [t for _, t in p.named_tensors()]
            with Tape() as t:
                loss = run()
            t.backward(loss)
            for pt in params:
                idx = pick_indices(rng, max(pt.size, 1), 6)
                fd = finite_diff_grad(lambda _: run().item(), pt, indices=idx)
                got = pt.grad if pt.grad is not None else np.zeros_like(pt.data)
                if pt.data.ndim == 0:
                    err = max_rel_err(fd, got, floor=1e-5)
                else:
                    err = max_rel_err(fd.reshape(-1)[idx], got.reshape(-1)[idx],
                                      floor=1e-5)
                assert err < 1e-4, f"{hw}x{hw} tensor {pt.name}: {err}"


def test_dense_bias_index_clamps():
    idx = dense_bias_index(8, 8, 4, 4)
    assert idx.min() >= 0 and idx.max() < (2 * 4 - 2) * (2 * 4 - 2)
