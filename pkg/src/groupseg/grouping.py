"""Content-aware spatial grouping layer, dense reference path.

A grouping layer halves the spatial resolution of a token grid and doubles
its channel width.  Output tokens are seeded by a strided convolution and
then refined for L iterations: a masked cross-attention produces a
row-stochastic input-to-output assignment, the assignment is renormalized
over columns, and output tokens are updated as weighted means of input
tokens with skip connections.

This module executes the layer densely, materializing the full
N_in x N_out assignment with an additive locality mask.  It is the
semantic ground truth the block-sparse path (:mod:`groupseg.sparse`) is
verified against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import ops
from .errors import GeometryError
from .tensor import Rng, Tensor, parameter

LOCAL_OFFSET_SPAN = 6  # relative offsets 2*R - r fall in [-3, 2] for a 3x3 window


@dataclass
class TokenGrid:
    """Tokens of one backbone stage: (h*w, d) values plus grid metadata."""

    tokens: Tensor
    h: int
    w: int

    @property
    def n(self) -> int:
        return self.h * self.w

    @property
    def d(self) -> int:
        return self.tokens.shape[-1]

    def __post_init__(self):
        if self.tokens.shape[0] != self.h * self.w:
            raise GeometryError(
                f"token count {self.tokens.shape[0]} != grid {self.h}x{self.w}")


@dataclass
class LocalityMask:
    """Permitted input->output pairs for local grouping on a 2x-downsampled grid.

    An input at (r, c) may be assigned only to output cells within Chebyshev
    distance 1 of its parent cell (r//2, c//2), clipped to the output grid.
    `neighbors`/`valid` pack those <=9 outputs per input; the contributor
    arrays are the inverse map (<=36 inputs per output).
    """

    h_in: int
    w_in: int
    h_out: int
    w_out: int
    neighbors: np.ndarray      # (N_in, 9) output index, -1 where invalid
    valid: np.ndarray          # (N_in, 9) bool
    contrib_input: np.ndarray  # (N_out, C) input row index, -1 where invalid
    contrib_slot: np.ndarray   # (N_out, C) slot within the input's 9-pack
    contrib_valid: np.ndarray  # (N_out, C) bool
    _additive: np.ndarray | None = field(default=None, repr=False)
    _bias_index: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_in(self) -> int:
        return self.h_in * self.w_in

    @property
    def n_out(self) -> int:
        return self.h_out * self.w_out

    def entry_count(self) -> int:
        return int(self.valid.sum())

    def additive(self) -> np.ndarray:
        """Dense (N_in, N_out) matrix of 0 (permitted) / NEG_MASK (forbidden)."""
        if self._additive is None:
            m = np.full((self.n_in, self.n_out), ops.NEG_MASK)
            rows = np.repeat(np.arange(self.n_in), 9).reshape(self.n_in, 9)
            m[rows[self.valid], self.neighbors[self.valid]] = 0.0
            self._additive = m
        return self._additive

    def bias_index(self) -> np.ndarray:
        """Dense (N_in, N_out) flat index into the 6x6 local bias table."""
        if self._bias_index is None:
            self._bias_index = _local_bias_index(self.h_in, self.w_in)
        return self._bias_index


@lru_cache(maxsize=64)
def build_local_mask(h_in: int, w_in: int) -> LocalityMask:
    """Construct the 3x3-window locality mask for an even h_in x w_in grid."""
    if h_in < 2 or w_in < 2 or h_in % 2 or w_in % 2:
        raise GeometryError(f"local grouping needs even dims >= 2, got {h_in}x{w_in}")
    h_out, w_out = h_in // 2, w_in // 2
    n_in, n_out = h_in * w_in, h_out * w_out

    rr, cc = np.meshgrid(np.arange(h_in), np.arange(w_in), indexing="ij")
    pr, pc = rr.reshape(-1) // 2, cc.reshape(-1) // 2
    neighbors = np.full((n_in, 9), -1, dtype=np.int64)
    valid = np.zeros((n_in, 9), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            slot = (dr + 1) * 3 + (dc + 1)
            orow, ocol = pr + dr, pc + dc
            ok = (orow >= 0) & (orow < h_out) & (ocol >= 0) & (ocol < w_out)
            neighbors[ok, slot] = orow[ok] * w_out + ocol[ok]
            valid[:, slot] = ok

    flat_j = neighbors[valid]
    flat_i = np.repeat(np.arange(n_in), valid.sum(axis=1))
    flat_s = np.tile(np.arange(9), n_in).reshape(n_in, 9)[valid]
    order = np.argsort(flat_j, kind="stable")
    counts = np.bincount(flat_j, minlength=n_out)
    width = int(counts.max())
    starts = np.concatenate([[0], np.cumsum(counts)])
    pos = np.arange(flat_j.size) - starts[flat_j[order]]
    contrib_input = np.full((n_out, width), -1, dtype=np.int64)
    contrib_slot = np.zeros((n_out, width), dtype=np.int64)
    contrib_valid = np.zeros((n_out, width), dtype=bool)
    contrib_input[flat_j[order], pos] = flat_i[order]
    contrib_slot[flat_j[order], pos] = flat_s[order]
    contrib_valid[flat_j[order], pos] = True
    return LocalityMask(h_in, w_in, h_out, w_out, neighbors, valid,
                        contrib_input, contrib_slot, contrib_valid)


@lru_cache(maxsize=64)
def _local_bias_index(h_in: int, w_in: int) -> np.ndarray:
    h_out, w_out = h_in // 2, w_in // 2
    r = np.arange(h_in)
    ro = np.arange(h_out)
    dr = np.clip(2 * ro[None, :] - r[:, None] + 3, 0, LOCAL_OFFSET_SPAN - 1)
    c = np.arange(w_in)
    co = np.arange(w_out)
    dc = np.clip(2 * co[None, :] - c[:, None] + 3, 0, LOCAL_OFFSET_SPAN - 1)
    # offsets outside the window are clipped; those logits are masked anyway
    idx = dr[:, None, :, None] * LOCAL_OFFSET_SPAN + dc[None, :, None, :]
    return idx.reshape(h_in * w_in, h_out * w_out)


@lru_cache(maxsize=64)
def dense_bias_index(h_in: int, w_in: int, h_max: int, w_max: int) -> np.ndarray:
    """Flat index into the dense-mode bias table, offsets clamped to the table."""
    rows, cols = 2 * h_max - 2, 2 * w_max - 2
    h_out, w_out = h_in // 2, w_in // 2
    dr = np.clip(2 * np.arange(h_out)[None, :] - np.arange(h_in)[:, None] + h_max - 1,
                 0, rows - 1)
    dc = np.clip(2 * np.arange(w_out)[None, :] - np.arange(w_in)[:, None] + w_max - 1,
                 0, cols - 1)
    idx = dr[:, None, :, None] * cols + dc[None, :, None, :]
    return idx.reshape(h_in * w_in, h_out * w_out)


def grouping_param_shapes(d_in: int, mlp_ratio: float, mode: str,
                          max_h_in: int = 14, max_w_in: int = 14) -> list[tuple[str, tuple]]:
    """Declared (name, shape) pairs for one grouping layer; the single source
    both for allocation and for parameter counting."""
    d_out = 2 * d_in
    hidden = int(round(mlp_ratio * d_out))
    if mode == "local":
        bias = (LOCAL_OFFSET_SPAN * LOCAL_OFFSET_SPAN,)
    elif mode == "dense":
        bias = ((2 * max_h_in - 2) * (2 * max_w_in - 2),)
    else:
        raise GeometryError(f"unknown grouping mode {mode!r}")
    return [
        ("conv_w", (3, 3, d_in, d_out)), ("conv_b", (d_out,)),
        ("ln_init_g", (d_out,)), ("ln_init_b", (d_out,)),
        ("k_w", (d_in, d_out)), ("k_b", (d_out,)),
        ("q_w", (d_out, d_out)), ("q_b", (d_out,)),
        ("v_w", (d_in, d_out)), ("v_b", (d_out,)),
        ("bias_table", bias),
        ("log_tau", ()),
        ("ln_upd_g", (d_out,)), ("ln_upd_b", (d_out,)),
        ("mlp_w1", (d_out, hidden)), ("mlp_b1", (hidden,)),
        ("mlp_w2", (hidden, d_out)), ("mlp_b2", (d_out,)),
        ("ln_mlp_g", (d_out,)), ("ln_mlp_b", (d_out,)),
    ]


@dataclass
class GroupingLayerParams:
    """All learnables of one grouping layer (shared across its L iterations)."""

    d_in: int
    d_out: int
    mode: str                 # "local" | "dense"
    iterations: int
    mlp_ratio: float
    max_h_in: int
    max_w_in: int
    tensors: dict[str, Tensor]

    def __getattr__(self, name):
        tensors = object.__getattribute__(self, "tensors")
        try:
            return tensors[name]
        except KeyError:
            raise AttributeError(name) from None

    def named_tensors(self, prefix: str = ""):
        for name, t in self.tensors.items():
            yield prefix + name, t


def init_grouping_params(rng: Rng, d_in: int, mode: str, iterations: int = 3,
                         mlp_ratio: float = 2.0, max_h_in: int = 14,
                         max_w_in: int = 14, init_std: float = 0.02) -> GroupingLayerParams:
    if iterations < 1:
        raise GeometryError("grouping layer needs at least one iteration")
    d_out = 2 * d_in
    tensors: dict[str, Tensor] = {}
    for name, shape in grouping_param_shapes(d_in, mlp_ratio, mode, max_h_in, max_w_in):
        if name == "log_tau":
            data = np.asarray(np.log(1.0 / np.sqrt(d_out)))
        elif name.endswith("_g"):
            data = np.ones(shape)
        elif name.endswith(("_b", "_b1", "_b2")):
            data = np.zeros(shape)
        else:
            data = rng.trunc_normal(shape, std=init_std)
        tensors[name] = parameter(data, name)
    return GroupingLayerParams(d_in, d_out, mode, iterations, mlp_ratio,
                               max_h_in, max_w_in, tensors)


@dataclass
class AssignmentPair:
    """Row-stochastic a_ups and column-stochastic a_down of one grouping layer."""

    a_ups: Tensor   # (N_in, N_out), rows sum to 1
    a_down: Tensor  # (N_in, N_out), columns sum to 1
    mode: str       # "local" | "dense"

    @property
    def n_in(self) -> int:
        return self.a_ups.shape[0]

    @property
    def n_out(self) -> int:
        return self.a_ups.shape[1]


def grouping_init(x_in: TokenGrid, params: GroupingLayerParams) -> TokenGrid:
    """Seed output tokens: LN(strided 3x3 conv), half resolution, 2x channels."""
    if x_in.h % 2 or x_in.w % 2:
        raise GeometryError(f"grouping needs even input dims, got {x_in.h}x{x_in.w}")
    grid = ops.reshape(x_in.tokens, (x_in.h, x_in.w, x_in.d))
    conv = ops.strided_conv2d(grid, params.conv_w, params.conv_b, stride=2, pad=1)
    flat = ops.reshape(conv, (x_in.n // 4, params.d_out))
    out = ops.layer_norm(flat, params.ln_init_g, params.ln_init_b)
    return TokenGrid(out, x_in.h // 2, x_in.w // 2)


def _assignment_logits(x_in: TokenGrid, x_out: TokenGrid, params: GroupingLayerParams,
                       mask: LocalityMask | None) -> Tensor:
    k = ops.linear(x_in.tokens, params.k_w, params.k_b)
    q = ops.linear(x_out.tokens, params.q_w, params.q_b)
    tau = ops.exp(params.log_tau)
    logits = ops.mul(ops.matmul(k, ops.transpose(q)), tau)
    if mask is None:
        idx = dense_bias_index(x_in.h, x_in.w, params.max_h_in, params.max_w_in)
    else:
        idx = mask.bias_index()
    logits = ops.add(logits, ops.gather_rows(params.bias_table, idx))
    if mask is not None:
        logits = ops.add(logits, Tensor(mask.additive()))
    return logits


def grouping_iteration(x_in: TokenGrid, x_out: TokenGrid, params: GroupingLayerParams,
                       mask: LocalityMask | None, eps: float = 0.0
                       ) -> tuple[TokenGrid, AssignmentPair]:
    """One refinement step: assignment, column renorm, attention + MLP updates.

    eps=0 is the faithful transcription (degenerate columns error); training
    paths pass eps>0 so the renormalization stays defined.
    """
    if x_out.n * 4 != x_in.n:
        raise GeometryError(f"output count {x_out.n} != input count {x_in.n} / 4")
    logits = _assignment_logits(x_in, x_out, params, mask)
    a_ups = ops.softmax_rows(logits)
    counts = mask.contrib_valid.sum(axis=1) if mask is not None else None
    a_down = ops.column_renorm(a_ups, eps=eps, support_counts=counts)
    v = ops.linear(x_in.tokens, params.v_w, params.v_b)
    update = ops.matmul(ops.transpose(a_down), v)
    x1 = ops.add(x_out.tokens, ops.layer_norm(update, params.ln_upd_g, params.ln_upd_b))
    mlp = ops.mlp_2layer(x1, params.mlp_w1, params.mlp_b1, params.mlp_w2, params.mlp_b2)
    x2 = ops.add(x1, ops.layer_norm(mlp, params.ln_mlp_g, params.ln_mlp_b))
    grid = TokenGrid(x2, x_out.h, x_out.w)
    return grid, AssignmentPair(a_ups, a_down, params.mode)


def grouping_forward(x_in: TokenGrid, params: GroupingLayerParams,
                     mode: str | None = None, eps: float = 0.0
                     ) -> tuple[TokenGrid, AssignmentPair]:
    """Full layer: conv seed then L iterations; returns the final iteration's
    assignment pair (intermediate pairs are discarded)."""
    mode = params.mode if mode is None else mode
    mask = build_local_mask(x_in.h, x_in.w) if mode == "local" else None
    x_out = grouping_init(x_in, params)
    pair = None
    for _ in range(params.iterations):
        x_out, pair = grouping_iteration(x_in, x_out, params, mask, eps=eps)
    return x_out, pair
