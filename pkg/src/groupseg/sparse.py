"""Block-sparse execution of the local grouping layer.

Stores at most 9 assignment weights per input token (one per permitted
output), so assignment memory is Theta(N_in) instead of Theta(N_in*N_out).
Every primitive here touches only stored entries; equivalence with the
masked-dense reference path is established by tests, not by matching its
intermediate tensors.

Internally the hot path works in a windowed layout: inputs are unfolded into
the 2x2 children of each parent cell and the 9 candidate outputs per parent
are materialized by shifted slices of the padded output grid.  Everything
then reduces to batched matmuls and slice-shift accumulations; there is no
random gather over token arrays.  The public packed layout stays input-major
(N_in, 9).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse import csr_matrix

from . import ops
from .errors import DegenerateColumnError, GeometryError
from .grouping import (AssignmentPair, GroupingLayerParams, LocalityMask,
                       TokenGrid, build_local_mask, grouping_init)
from .tensor import Tensor, record

DEFAULT_EPS = 1e-6

# window slot s <-> offset (dr, dc), row-major over the 3x3 neighborhood
DELTAS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]


@dataclass
class SparseWorkspace:
    """Reusable per-geometry scratch: the mask plus derived window indexing."""

    mask: LocalityMask
    h_out: int
    w_out: int
    valid_win: np.ndarray      # (N_out, 4, 9) validity in window layout
    bias_idx_block: np.ndarray  # (2, 2, 9) flat index into the 6x6 bias table
    contrib_count: np.ndarray  # (N_out,) stored entries per output column

    @property
    def n_in(self) -> int:
        return self.mask.n_in

    @property
    def n_out(self) -> int:
        return self.mask.n_out


def _to_window(flat: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """(N_in, d) input-major -> (N_out, 4, d) children-of-parent layout."""
    d = flat.shape[-1]
    return np.ascontiguousarray(
        flat.reshape(h_out, 2, w_out, 2, d).transpose(0, 2, 1, 3, 4)
    ).reshape(h_out * w_out, 4, d)


def _from_window(win: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """(N_out, 4, d) children layout -> (N_in, d) input-major."""
    d = win.shape[-1]
    return np.ascontiguousarray(
        win.reshape(h_out, w_out, 2, 2, d).transpose(0, 2, 1, 3, 4)
    ).reshape(4 * h_out * w_out, d)


def _slices9(grid: np.ndarray, h_out: int, w_out: int,
             pad_value: float = 0.0) -> np.ndarray:
    """All 9 shifted views of a padded (h_out, w_out, d) grid: (N_out, 9, d)."""
    d = grid.shape[-1]
    padded = np.full((h_out + 2, w_out + 2, d), pad_value)
    padded[1:-1, 1:-1] = grid
    out = np.empty((h_out, w_out, 9, d))
    for s, (dr, dc) in enumerate(DELTAS):
        out[:, :, s] = padded[1 + dr:1 + dr + h_out, 1 + dc:1 + dc + w_out]
    return out.reshape(h_out * w_out, 9, d)


def _shift_accumulate(per_parent: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Scatter (N_out, 9, d) window contributions onto their target cells:
    out[P + delta_s] += per_parent[P, s]."""
    d = per_parent.shape[-1]
    acc = np.zeros((h_out + 2, w_out + 2, d))
    pp = per_parent.reshape(h_out, w_out, 9, d)
    for s, (dr, dc) in enumerate(DELTAS):
        acc[1 + dr:1 + dr + h_out, 1 + dc:1 + dc + w_out] += pp[:, :, s]
    return acc[1:-1, 1:-1].reshape(h_out * w_out, d)


@lru_cache(maxsize=64)
def make_workspace(h_in: int, w_in: int) -> SparseWorkspace:
    mask = build_local_mask(h_in, w_in)
    h_out, w_out = h_in // 2, w_in // 2
    valid_win = _to_window(mask.valid.astype(np.float64), h_out, w_out) > 0.5
    # relative offset 2*R - r decomposes to 2*dr - child parity per axis
    bias_idx = np.empty((2, 2, 9), dtype=np.int64)
    for a in (0, 1):
        for b in (0, 1):
            for s, (dr, dc) in enumerate(DELTAS):
                bias_idx[a, b, s] = (2 * dr - a + 3) * 6 + (2 * dc - b + 3)
    return SparseWorkspace(
        mask=mask, h_out=h_out, w_out=w_out, valid_win=valid_win,
        bias_idx_block=bias_idx,
        contrib_count=mask.contrib_valid.sum(axis=1))


@dataclass
class BlockSparseAssignment:
    """(N_in, 9) packed values over the locality mask's support."""

    values: Tensor
    ws: SparseWorkspace
    kind: str  # "logits" | "ups" | "down"

    @property
    def n_in(self) -> int:
        return self.ws.mask.n_in

    @property
    def n_out(self) -> int:
        return self.ws.mask.n_out

    def entry_count(self) -> int:
        return self.ws.mask.entry_count()

    def to_dense(self) -> np.ndarray:
        m = self.ws.mask
        out = np.zeros((m.n_in, m.n_out))
        rows = np.broadcast_to(np.arange(m.n_in)[:, None], (m.n_in, 9))
        out[rows[m.valid], m.neighbors[m.valid]] = self.values.data[m.valid]
        return out

    def to_csr(self) -> csr_matrix:
        m = self.ws.mask
        rows = np.broadcast_to(np.arange(m.n_in)[:, None], (m.n_in, 9))
        return csr_matrix(
            (self.values.data[m.valid], (rows[m.valid], m.neighbors[m.valid])),
            shape=(m.n_in, m.n_out))


def sparse_qk(k: TokenGrid, q: TokenGrid, bias_table: Tensor, tau: Tensor,
              ws: SparseWorkspace) -> BlockSparseAssignment:
    """Stored logits tau*<k_i, q_j> + B[offset(i,j)] for permitted (i, j) only."""
    if (q.h, q.w) != (k.h // 2, k.w // 2) or (k.h, k.w) != (ws.mask.h_in, ws.mask.w_in):
        raise GeometryError(
            f"sparse_qk geometry mismatch: k {k.h}x{k.w}, q {q.h}x{q.w}")
    ho, wo = ws.h_out, ws.w_out
    dk = k.d
    kw = _to_window(k.tokens.data, ho, wo)                   # (N_out, 4, dk)
    qwin = _slices9(q.tokens.data.reshape(ho, wo, dk), ho, wo)  # (N_out, 9, dk)
    dots = kw @ qwin.transpose(0, 2, 1)                      # (N_out, 4, 9)
    bias_block = bias_table.data[ws.bias_idx_block]          # (2, 2, 9)
    vals_win = (tau.data * dots + bias_block.reshape(1, 4, 9)) * ws.valid_win
    vals = _from_window(vals_win, ho, wo)                    # (N_in, 9)

    def vjp(g):
        gw = _to_window(g, ho, wo) * ws.valid_win            # (N_out, 4, 9)
        gt = gw * tau.data
        gk = _from_window(gt @ qwin, ho, wo)                 # (N_in, dk)
        gq = _shift_accumulate(
            (gt.transpose(0, 2, 1) @ kw), ho, wo)            # (N_out, dk)
        gtau = np.asarray((gw * dots).sum())
        gb = np.zeros_like(bias_table.data)
        np.add.at(gb, ws.bias_idx_block.reshape(4, 9), gw.sum(axis=0))
        return gk, gq, gtau, gb

    out = record(vals, (k.tokens, q.tokens, tau, bias_table), vjp, "sparse_qk")
    return BlockSparseAssignment(out, ws, "logits")


def sparse_softmax(logits: BlockSparseAssignment) -> BlockSparseAssignment:
    """Per-input softmax over the stored (permitted) entries."""
    ws = logits.ws
    valid = ws.mask.valid
    x = logits.values.data
    m = np.where(valid, x, -np.inf).max(axis=1, keepdims=True)
    e = np.exp((x - m) * valid) * valid  # exponent zeroed at invalid slots
    s = e.sum(axis=1, keepdims=True)
    u = e / s

    def vjp(g):
        g = g * valid
        dot = (g * u).sum(axis=1, keepdims=True)
        return (u * (g - dot),)

    out = record(u, (logits.values,), vjp, "sparse_softmax")
    return BlockSparseAssignment(out, ws, "ups")


def _column_sums(values: np.ndarray, ws: SparseWorkspace) -> np.ndarray:
    """(N_out,) sums over each output's stored contributors, via shift-adds."""
    uw = _to_window(values, ws.h_out, ws.w_out)              # (N_out, 4, 9)
    per_parent = uw.sum(axis=1)[:, :, None]                  # (N_out, 9, 1)
    return _shift_accumulate(per_parent, ws.h_out, ws.w_out).reshape(-1)


def _gather_per_output(col: np.ndarray, ws: SparseWorkspace,
                       pad_value: float) -> np.ndarray:
    """Distribute an (N_out,) quantity back onto stored entries: (N_in, 9)."""
    win9 = _slices9(col.reshape(ws.h_out, ws.w_out, 1), ws.h_out, ws.w_out,
                    pad_value=pad_value)                     # (N_out, 9, 1)
    expanded = np.broadcast_to(win9.transpose(0, 2, 1), (ws.n_out, 4, 9))
    return _from_window(np.ascontiguousarray(expanded), ws.h_out, ws.w_out)


def sparse_renorm(ups: BlockSparseAssignment, eps: float) -> BlockSparseAssignment:
    """Column renormalization with an epsilon floor accumulated per entry.

    a_down[i,j] = u[i,j] / (sum_k u[k,j] + c_j * eps) where c_j counts the
    stored contributors of output j; eps=0 reproduces the reference division
    exactly and raises on degenerate columns like the reference path.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    ws = ups.ws
    valid = ws.mask.valid
    u = ups.values.data
    denom = _column_sums(u, ws) + ws.contrib_count * eps
    if eps == 0.0 and denom.min() < 1e-12:
        j = int(denom.argmin())
        raise DegenerateColumnError(
            f"assignment column {j} has total mass {denom.min():.3e} and eps=0")
    inv = _gather_per_output(1.0 / denom, ws, pad_value=0.0)  # (N_in, 9)
    d = u * inv * valid

    def vjp(g):
        g = g * valid
        c1 = _column_sums(g * d, ws) / denom
        return ((g * inv - _gather_per_output(c1, ws, 0.0)) * valid,)

    out = record(d, (ups.values,), vjp, "sparse_renorm")
    return BlockSparseAssignment(out, ws, "down")


def sparse_softmax_renorm(logits: BlockSparseAssignment, eps: float = DEFAULT_EPS
                          ) -> tuple[BlockSparseAssignment, BlockSparseAssignment]:
    """Row softmax (a_ups, reported without the eps addition) then column
    renormalization with the eps floor (a_down)."""
    ups = sparse_softmax(logits)
    return ups, sparse_renorm(ups, eps)


def sparse_av(down: BlockSparseAssignment, v: TokenGrid) -> Tensor:
    """updates_j = sum_i a_down[i,j] * v_i over stored entries only."""
    ws = down.ws
    if (v.h, v.w) != (ws.mask.h_in, ws.mask.w_in):
        raise GeometryError(f"sparse_av geometry mismatch: v {v.h}x{v.w}")
    ho, wo = ws.h_out, ws.w_out
    dw = _to_window(down.values.data, ho, wo) * ws.valid_win  # (N_out, 4, 9)
    vw = _to_window(v.tokens.data, ho, wo)                    # (N_out, 4, dv)
    per_parent = dw.transpose(0, 2, 1) @ vw                   # (N_out, 9, dv)
    updates = _shift_accumulate(per_parent, ho, wo)           # (N_out, dv)

    def vjp(g):
        gwin = _slices9(g.reshape(ho, wo, -1), ho, wo)        # (N_out, 9, dv)
        gvals = _from_window((vw @ gwin.transpose(0, 2, 1)) * ws.valid_win, ho, wo)
        gv = _from_window(dw @ gwin, ho, wo)                  # (N_in, dv)
        return gvals, gv

    return record(updates, (down.values, v.tokens), vjp, "sparse_av")


def sparse_apply_ups(ups: BlockSparseAssignment, y: Tensor) -> Tensor:
    """Upsample stage-(l+1) features y:(N_out,d) to (N_in,d): out = A_ups @ y."""
    ws = ups.ws
    ho, wo = ws.h_out, ws.w_out
    vals_win = _to_window(ups.values.data, ho, wo) * ws.valid_win  # (N_out, 4, 9)
    ywin = _slices9(y.data.reshape(ho, wo, -1), ho, wo)            # (N_out, 9, d)
    out = _from_window(vals_win @ ywin, ho, wo)                    # (N_in, d)

    def vjp(g):
        gw = _to_window(g, ho, wo)                                 # (N_out, 4, d)
        gvals = _from_window((gw @ ywin.transpose(0, 2, 1)) * ws.valid_win, ho, wo)
        gy = _shift_accumulate(vals_win.transpose(0, 2, 1) @ gw, ho, wo)
        return gvals, gy

    return record(out, (ups.values, y), vjp, "sparse_apply_ups")


def sparse_grouping_forward(x_in: TokenGrid, params: GroupingLayerParams,
                            eps: float = DEFAULT_EPS
                            ) -> tuple[TokenGrid, tuple[BlockSparseAssignment,
                                                        BlockSparseAssignment]]:
    """Full grouping layer on the block-sparse path (local mode only)."""
    if params.mode != "local":
        raise GeometryError("sparse path supports local mode only")
    ws = make_workspace(x_in.h, x_in.w)
    x_out = grouping_init(x_in, params)
    tau = ops.exp(params.log_tau)
    pair = None
    for _ in range(params.iterations):
        k = TokenGrid(ops.linear(x_in.tokens, params.k_w, params.k_b), x_in.h, x_in.w)
        q = TokenGrid(ops.linear(x_out.tokens, params.q_w, params.q_b), x_out.h, x_out.w)
        logits = sparse_qk(k, q, params.bias_table, tau, ws)
        ups, down = sparse_softmax_renorm(logits, eps)
        v = TokenGrid(ops.linear(x_in.tokens, params.v_w, params.v_b), x_in.h, x_in.w)
        update = sparse_av(down, v)
        x1 = ops.add(x_out.tokens, ops.layer_norm(update, params.ln_upd_g, params.ln_upd_b))
        mlp = ops.mlp_2layer(x1, params.mlp_w1, params.mlp_b1, params.mlp_w2, params.mlp_b2)
        x2 = ops.add(x1, ops.layer_norm(mlp, params.ln_mlp_g, params.ln_mlp_b))
        x_out = TokenGrid(x2, x_out.h, x_out.w)
        pair = (ups, down)
    return x_out, pair


def dense_pair_from_sparse(pair: tuple[BlockSparseAssignment, BlockSparseAssignment]
                           ) -> AssignmentPair:
    """Materialize a sparse pair densely (analysis/debug use, not differentiable)."""
    ups, down = pair
    return AssignmentPair(Tensor(ups.to_dense()), Tensor(down.to_dense()), "local")
