"""Markov-chain composition of per-stage assignments and derived segmentations.

Each grouping layer emits a row-stochastic a_ups and a column-stochastic
a_down.  Treating the a_ups matrices as state-transition matrices, the
product over consecutive stages maps tokens at any stage to any earlier
stage; the transposed a_down product maps the other way.  Hard segment maps
are the per-row argmax of a composed a_ups.

Composition keeps block-sparse links in CSR form and densifies only once a
dense link enters the product.  These composition routines are analysis-side
(plain numpy); the differentiable path applies links sequentially via
``apply_ups_chain``, which tests tie to composition by associativity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix, issparse

from . import ops
from .errors import ShapeError, UsageError
from .grouping import AssignmentPair
from .sparse import BlockSparseAssignment, sparse_apply_ups
from .tensor import Tensor


@dataclass
class ChainLink:
    """One grouping layer's assignment pair plus its grid geometry."""

    pair: AssignmentPair | tuple[BlockSparseAssignment, BlockSparseAssignment]
    h_in: int
    w_in: int
    h_out: int
    w_out: int

    @property
    def sparse(self) -> bool:
        return not isinstance(self.pair, AssignmentPair)

    @property
    def n_in(self) -> int:
        return self.h_in * self.w_in

    @property
    def n_out(self) -> int:
        return self.h_out * self.w_out

    def ups_matrix(self):
        """Row-stochastic (n_in, n_out); CSR when the link is sparse."""
        if self.sparse:
            return self.pair[0].to_csr()
        return self.pair.a_ups.data

    def down_matrix(self):
        """Column-stochastic (n_in, n_out); CSR when the link is sparse."""
        if self.sparse:
            return self.pair[1].to_csr()
        return self.pair.a_down.data

    def apply_ups(self, y: Tensor) -> Tensor:
        """Differentiable y -> A_ups @ y mapping stage-(l+1) features to stage l."""
        if self.sparse:
            return sparse_apply_ups(self.pair[0], y)
        return ops.matmul(self.pair.a_ups, y)


@dataclass
class AssignmentChain:
    """Ordered links stage 1->2, 2->3, 3->4 (or any consecutive prefix)."""

    links: list[ChainLink]

    def __post_init__(self):
        for a, b in zip(self.links, self.links[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(
                    f"chain geometry broken: link out {a.n_out} != next in {b.n_in}")

    @property
    def n_stages(self) -> int:
        return len(self.links) + 1

    def link(self, out_stage: int) -> ChainLink:
        """The link producing `out_stage` tokens (out_stage in [2, n_stages])."""
        return self.links[out_stage - 2]


def _check_stages(chain: AssignmentChain, from_stage: int, to_stage: int,
                  direction: str) -> None:
    n = chain.n_stages
    lo, hi = min(from_stage, to_stage), max(from_stage, to_stage)
    if lo < 1 or hi > n:
        raise UsageError(f"stages must lie in [1, {n}], got {from_stage}->{to_stage}")
    if direction == "ups" and not to_stage < from_stage:
        raise UsageError(f"compose_ups needs to_stage < from_stage, got {from_stage}->{to_stage}")
    if direction == "down" and not to_stage > from_stage:
        raise UsageError(f"compose_down needs to_stage > from_stage, got {from_stage}->{to_stage}")


def _densify(m) -> np.ndarray:
    return np.asarray(m.todense()) if issparse(m) else m


def compose_ups(chain: AssignmentChain, from_stage: int, to_stage: int) -> np.ndarray:
    """Composed row-stochastic map (N_to x N_from): product of a_ups links.

    Sparse x sparse products stay sparse until a dense link enters.
    """
    _check_stages(chain, from_stage, to_stage, "ups")
    prod = None
    for s in range(to_stage, from_stage):          # link stage s -> s+1
        m = chain.link(s + 1).ups_matrix()
        prod = m if prod is None else prod @ m
    return _densify(prod)


def compose_down(chain: AssignmentChain, from_stage: int, to_stage: int) -> np.ndarray:
    """Composed map (N_to x N_from): transposed a_down product, rows sum to 1."""
    _check_stages(chain, from_stage, to_stage, "down")
    prod = None
    for s in range(to_stage - 1, from_stage - 1, -1):   # link stage s -> s+1
        m = chain.link(s + 1).down_matrix().T
        prod = m if prod is None else prod @ m
    return _densify(prod)


def upsample_features(a_ups_comp: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y = a_ups_comp @ x; stochastic rows preserve the probability simplex."""
    a = np.asarray(a_ups_comp)
    x = np.asarray(x)
    if a.shape[1] != x.shape[0]:
        raise ShapeError(f"upsample shapes disagree: {a.shape} @ {x.shape}")
    return a @ x


def apply_ups_chain(chain: AssignmentChain, from_stage: int, to_stage: int,
                    y: Tensor) -> Tensor:
    """Differentiable sequential application of a_ups links, stage from->to."""
    _check_stages(chain, from_stage, to_stage, "ups")
    for s in range(from_stage, to_stage, -1):      # link stage s-1 -> s
        y = chain.link(s).apply_ups(y)
    return y


@dataclass
class SegmentMap:
    """Hard segment labels over a token grid."""

    labels: np.ndarray  # (h, w) int
    n_segments: int
    stage: int

    @property
    def used_labels(self) -> np.ndarray:
        return np.unique(self.labels)


def save_segment_map(path: str, seg: SegmentMap) -> None:
    """Serialize as a 16-bit grayscale label image plus a JSON sidecar
    recording (stage, n_segments, geometry) at `path` + ".json"."""
    import json

    from .imageio import write_pgm16
    write_pgm16(path, seg.labels.astype(np.uint16))
    h, w = seg.labels.shape
    with open(path + ".json", "w") as f:
        json.dump({"stage": seg.stage, "n_segments": int(seg.n_segments),
                   "geometry": [int(h), int(w)]}, f, indent=1)


def load_segment_map(path: str) -> SegmentMap:
    import json

    from .imageio import read_pgm16
    labels = read_pgm16(path).astype(np.int64)
    with open(path + ".json") as f:
        meta = json.load(f)
    return SegmentMap(labels, int(meta["n_segments"]), int(meta["stage"]))


def hard_assign(a_ups_comp: np.ndarray, h: int, w: int, stage: int = 0) -> SegmentMap:
    """label(i) = argmax_j of the composed row; ties go to the lowest index."""
    a = np.asarray(a_ups_comp)
    if a.shape[0] != h * w:
        raise ShapeError(f"rows {a.shape[0]} != grid {h}x{w}")
    labels = a.argmax(axis=1).reshape(h, w)
    return SegmentMap(labels, a.shape[1], stage)


def stage_segmentations(chain: AssignmentChain, h1: int, w1: int) -> dict[int, SegmentMap]:
    """Hard segment maps on the stride-4 patch grid for every later stage."""
    out = {}
    for s in range(2, chain.n_stages + 1):
        out[s] = hard_assign(compose_ups(chain, s, 1), h1, w1, stage=s)
    return out


def labels_to_pixels(labels: np.ndarray, factor: int = 4) -> np.ndarray:
    """Nearest-neighbor replication of hard labels to pixel resolution."""
    return np.repeat(np.repeat(labels, factor, axis=0), factor, axis=1)


def row_entropy(a: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the rows of a stochastic matrix."""
    a = np.asarray(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(a > 0, a * np.log(a), 0.0)
    return float(-t.sum(axis=1).mean())


def sparse_row_entropy(bsa: BlockSparseAssignment) -> float:
    vals = bsa.values.data
    valid = bsa.ws.mask.valid
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where((vals > 0) & valid, vals * np.log(np.maximum(vals, 1e-300)), 0.0)
    return float(-t.sum(axis=1).mean())
