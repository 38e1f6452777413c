"""Losses, bipartite matching, and segmentation metrics.

The Hungarian solver delegates the inner optimum to scipy's
linear_sum_assignment and canonicalizes ties lexicographically; the
brute-force permutation oracle used by tests lives here too and never calls
the solver.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import ops
from .errors import UsageError
from .tensor import Tensor, record

IGNORE_INDEX = -1
_CLIP = 1e-12


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over non-ignored rows, stable log-softmax.

    An all-ignored batch yields 0 with zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise UsageError(f"targets shape {targets.shape} != ({n},)")
    keep = targets != ignore_index
    if keep.any() and (targets[keep].min() < 0 or targets[keep].max() >= c):
        raise UsageError("target labels out of range")
    if not keep.any():
        return record(np.asarray(0.0), (logits,),
                      lambda g: (np.zeros_like(logits.data),), "cross_entropy")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(keep)[0]
    nk = rows.size
    out = np.asarray(-logp[rows, targets[rows]].mean())

    def vjp(g):
        soft = np.exp(logp)
        gl = np.zeros_like(logits.data)
        gl[rows] = soft[rows]
        gl[rows, targets[rows]] -= 1.0
        return (gl * (g / nk),)

    return record(out, (logits,), vjp, "cross_entropy")


def mask_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Per-pixel binary cross-entropy plus Dice loss, equal weights.

    `pred` holds soft mask values in [0, 1]; probabilities are clipped away
    from 0/1 inside the BCE term.  Dice uses +1 smoothing so an empty ground
    truth stays finite.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    p = pred.data.reshape(-1)
    if p.shape != gt.shape:
        raise UsageError(f"mask shapes disagree: {pred.shape} vs {gt.shape}")
    n = p.size
    pc = np.clip(p, _CLIP, 1.0 - _CLIP)
    bce = -(gt * np.log(pc) + (1.0 - gt) * np.log(1.0 - pc)).mean()
    inter = (p * gt).sum()
    total = p.sum() + gt.sum()
    dice = 1.0 - (2.0 * inter + 1.0) / (total + 1.0)
    out = np.asarray(bce + dice)

    def vjp(g):
        inside = (p > _CLIP) & (p < 1.0 - _CLIP)
        gbce = np.where(inside, (-gt / pc + (1.0 - gt) / (1.0 - pc)) / n, 0.0)
        gdice = -(2.0 * gt * (total + 1.0) - (2.0 * inter + 1.0)) / (total + 1.0) ** 2
        return ((gbce + gdice).reshape(pred.shape) * g,)

    return record(out, (pred,), vjp, "mask_loss")


# --- bipartite matching -------------------------------------------------------

def _lsa_total(cost: np.ndarray) -> float:
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost matching of min(n, m) pairs.

    Among equal-cost optima, returns the lexicographically smallest pair
    sequence: rows are fixed in ascending order, each to the smallest column
    that still admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise UsageError(f"cost must be a non-empty 2-D matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise UsageError("cost matrix must be finite")
    n, m = cost.shape
    k_total = min(n, m)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max())) * k_total
    best = _lsa_total(cost)

    pairs: list[tuple[int, int]] = []
    cols = list(range(m))
    fixed = 0.0
    for i in range(n):
        if len(pairs) == k_total:
            break
        rest_rows = list(range(i + 1, n))
        for j in cols:
            rest_cols = [c for c in cols if c != j]
            if len(pairs) + 1 + min(len(rest_rows), len(rest_cols)) < k_total:
                continue  # fixing (i, j) could no longer reach a full matching
            rem = (_lsa_total(cost[np.ix_(rest_rows, rest_cols)])
                   if rest_rows and rest_cols else 0.0)
            if abs(fixed + cost[i, j] + rem - best) <= tol:
                pairs.append((i, j))
                fixed += cost[i, j]
                cols = rest_cols
                break
        # no column fixable: every optimal completion skips row i (n > m case)
    if len(pairs) != k_total:
        raise UsageError("hungarian failed to reconstruct an optimal matching")
    return pairs


def brute_force_matching(cost: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Exhaustive min-cost matching over all permutations (oracle; sizes <= 8)."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    best_total, best_pairs = np.inf, None
    if n <= m:
        for perm in permutations(range(m), n):
            total = cost[range(n), perm].sum()
            pairs = sorted(zip(range(n), perm))
            if total < best_total - 1e-15 or (
                    abs(total - best_total) <= 1e-15 and pairs < best_pairs):
                best_total, best_pairs = total, pairs
    else:
        for perm in permutations(range(n), m):
            total = cost[perm, range(m)].sum()
            pairs = sorted(zip(perm, range(m)))
            if total < best_total - 1e-15 or (
                    abs(total - best_total) <= 1e-15 and pairs < best_pairs):
                best_total, best_pairs = total, pairs
    return float(best_total), list(best_pairs)


# --- panoptic training loss ---------------------------------------------------

@dataclass
class PanopticLossWeights:
    klass: float = 1.0
    mask: float = 1.0
    no_object: float = 0.1


def _single_ce(logits_row: Tensor, target: int) -> Tensor:
    return cross_entropy(logits_row, np.asarray([target]))


def _ordered_sum(terms: list[Tensor]) -> Tensor:
    """Sum scalar terms in ascending value order: the result is exactly
    invariant under any permutation of the inputs."""
    order = np.argsort([t.item() for t in terms], kind="stable")
    total = terms[order[0]]
    for i in order[1:]:
        total = ops.add(total, terms[i])
    return total


def panoptic_training_loss(class_logits: Tensor, masks: Tensor,
                           gt_classes: np.ndarray, gt_masks: np.ndarray,
                           no_object_index: int,
                           weights: PanopticLossWeights = PanopticLossWeights()
                           ) -> Tensor:
    """Hungarian-matched class + mask losses; unmatched candidates are pushed
    toward no-object.  Exactly invariant under prediction/ground-truth order.
    """
    k = class_logits.shape[0]
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    g = gt_classes.size
    if masks.shape[1] != k:
        raise UsageError(f"mask columns {masks.shape[1]} != candidates {k}")

    logp = class_logits.data - class_logits.data.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    matched: dict[int, int] = {}
    if g:
        cost = np.empty((k, g))
        for gi in range(g):
            nll = -logp[:, gt_classes[gi]]
            for p in range(k):
                ml = _mask_loss_value(masks.data[:, p], gt_masks[gi])
                cost[p, gi] = weights.klass * nll[p] + weights.mask * ml
        matched = {p: gi for p, gi in hungarian(cost)}

    terms: list[Tensor] = []
    for gi in sorted(matched.values()):
        p = next(pp for pp, gg in matched.items() if gg == gi)
        row = ops.gather_rows(class_logits, np.asarray([p]))
        col = ops.reshape(ops.gather_rows(ops.transpose(masks), np.asarray([p])),
                          (masks.shape[0],))
        term = ops.add(ops.scale(_single_ce(row, int(gt_classes[gi])), weights.klass),
                       ops.scale(mask_loss(col, gt_masks[gi]), weights.mask))
        terms.append(term)
    matched_sum = _ordered_sum(terms) if terms else Tensor(np.asarray(0.0))

    no_obj_terms = []
    for p in range(k):
        if p not in matched:
            row = ops.gather_rows(class_logits, np.asarray([p]))
            no_obj_terms.append(_single_ce(row, no_object_index))
    loss = ops.scale(matched_sum, 1.0 / max(g, 1))
    if no_obj_terms:
        no_obj = ops.scale(_ordered_sum(no_obj_terms), weights.no_object / k)
        loss = ops.add(loss, no_obj)
    return loss


def _mask_loss_value(pred: np.ndarray, gt: np.ndarray) -> float:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    pc = np.clip(p, _CLIP, 1.0 - _CLIP)
    bce = -(gt * np.log(pc) + (1.0 - gt) * np.log(1.0 - pc)).mean()
    dice = 1.0 - (2.0 * (p * gt).sum() + 1.0) / (p.sum() + gt.sum() + 1.0)
    return float(bce + dice)


# --- metrics -------------------------------------------------------------------

def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    return float((pred == gt).mean())


def mean_iou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> float:
    """Mean IoU over classes present in the ground truth."""
    pred, gt = np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1)
    ious = []
    for c in range(n_classes):
        gt_c, pred_c = gt == c, pred == c
        union = (gt_c | pred_c).sum()
        if gt_c.sum() == 0:
            continue
        ious.append((gt_c & pred_c).sum() / union)
    return float(np.mean(ious)) if ious else 0.0


def matched_instance_quality(pred_masks: np.ndarray, gt_masks: np.ndarray) -> float:
    """Mean IoU of Hungarian-matched (predicted, ground-truth) instance masks."""
    if len(gt_masks) == 0 or len(pred_masks) == 0:
        return 0.0
    pm = np.asarray(pred_masks, dtype=bool)
    gm = np.asarray(gt_masks, dtype=bool)
    iou = np.zeros((pm.shape[0], gm.shape[0]))
    for i in range(pm.shape[0]):
        for j in range(gm.shape[0]):
            union = (pm[i] | gm[j]).sum()
            iou[i, j] = (pm[i] & gm[j]).sum() / union if union else 0.0
    pairs = hungarian(1.0 - iou)
    return float(np.mean([iou[i, j] for i, j in pairs])) if pairs else 0.0
