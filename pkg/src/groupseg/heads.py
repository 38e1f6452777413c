"""Native segmentation heads: semantic MLP, zero-shot classification from
class embeddings, and panoptic candidate extraction with mask refinement.

All heads operate purely on final tokens plus the assignment chain; there is
no decoder.  Per-patch predictions are obtained by pushing per-token outputs
through the chain's upsampling links.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .assignment import AssignmentChain, apply_ups_chain, compose_ups
from .backbone import BackboneOutput
from .errors import ConfigError, UsageError
from .grouping import TokenGrid
from .tensor import Rng, Tensor, parameter

SEMANTIC_HIDDEN = 512


def _mlp_shapes(prefix: str, d_in: int, hidden: int, d_out: int):
    return [(f"{prefix}_w1", (d_in, hidden)), (f"{prefix}_b1", (hidden,)),
            (f"{prefix}_w2", (hidden, d_out)), (f"{prefix}_b2", (d_out,))]


@dataclass
class SemanticHeadParams:
    """Main 2-layer MLP over final tokens; aux MLP over stage-3 tokens
    concatenated with upsampled final tokens (training only)."""

    n_classes: int
    tensors: dict[str, Tensor]

    def __getattr__(self, name):
        tensors = object.__getattribute__(self, "tensors")
        try:
            return tensors[name]
        except KeyError:
            raise AttributeError(name) from None

    def named_tensors(self, prefix: str = "sem."):
        for n, t in self.tensors.items():
            yield prefix + n, t


def init_semantic_head(rng: Rng, d3: int, d4: int, n_classes: int,
                       hidden: int = SEMANTIC_HIDDEN) -> SemanticHeadParams:
    shapes = _mlp_shapes("main", d4, hidden, n_classes) \
        + _mlp_shapes("aux", d3 + d4, hidden, n_classes)
    tensors = {}
    for name, shape in shapes:
        data = np.zeros(shape) if name.endswith(("b1", "b2")) \
            else rng.trunc_normal(shape, std=0.02)
        tensors[name] = parameter(data, "sem." + name)
    return SemanticHeadParams(n_classes, tensors)


def semantic_segment(out: BackboneOutput, head: SemanticHeadParams) -> Tensor:
    """Per-patch class logits at stride 4: MLP over final tokens, upsampled
    through the learned assignment chain."""
    if not out.chain.links:
        raise UsageError("semantic_segment needs the assignment chain")
    y4 = ops.mlp_2layer(out.stage_tokens[3].tokens,
                        head.main_w1, head.main_b1, head.main_w2, head.main_b2)
    return apply_ups_chain(out.chain, 4, 1, y4)


def semantic_aux_logits(out: BackboneOutput, head: SemanticHeadParams) -> Tensor:
    """Auxiliary per-patch logits from the penultimate stage (training only):
    stage-3 tokens concatenated with upsampled final tokens, through the aux MLP."""
    ctx = out.chain.link(4).apply_ups(out.stage_tokens[3].tokens)   # (N3, d4)
    cat = ops.concat_cols(out.stage_tokens[2].tokens, ctx)
    y3 = ops.mlp_2layer(cat, head.aux_w1, head.aux_b1, head.aux_w2, head.aux_b2)
    return apply_ups_chain(out.chain, 3, 1, y3)


# --- zero-shot classification path -------------------------------------------

@dataclass
class ClassEmbeddingSet:
    """Unit-norm class vectors for the zero-shot path."""

    names: list[str]
    vectors: np.ndarray          # (C, d_e), L2-normalized rows
    background: bool = False
    top_k: int = 3

    def __post_init__(self):
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise UsageError("class embeddings must be L2-normalized (within 1e-6)")

    @classmethod
    def from_json(cls, path: str, background: bool = False, top_k: int = 3):
        with open(path) as f:
            raw = json.load(f)
        if not isinstance(raw, dict) or not raw:
            raise ConfigError(f"{path}: expected a non-empty JSON object")
        names = list(raw.keys())
        vectors = np.asarray([raw[n] for n in names], dtype=np.float64)
        return cls(names, vectors, background=background, top_k=top_k)


@dataclass
class ZeroShotResult:
    labels: np.ndarray           # (h1, w1); 0 = background when enabled
    patch_similarity: np.ndarray  # (N1, C)
    class_similarity: np.ndarray  # (C,) blended image-level similarity
    threshold: float | None


@dataclass
class ZeroShotProjection:
    w: Tensor
    b: Tensor

    def named_tensors(self, prefix: str = "zs."):
        yield prefix + "w", self.w
        yield prefix + "b", self.b


def init_zero_shot_projection(rng: Rng, d4: int, d_e: int) -> ZeroShotProjection:
    return ZeroShotProjection(parameter(rng.trunc_normal((d4, d_e), std=0.02), "zs.w"),
                              parameter(np.zeros(d_e), "zs.b"))


def zero_shot_segment(out: BackboneOutput, emb: ClassEmbeddingSet,
                      proj: ZeroShotProjection) -> ZeroShotResult:
    """Dot-product similarities of projected final tokens against class
    embeddings, upsampled to patches, argmaxed over classes.

    With a background class, a patch is foreground only if its best class
    similarity reaches mean + one (population) standard deviation of the
    top-k blended image-level similarities.  The blended similarity of a
    class is the even average of its pooled image-level similarity and its
    maximum per-token similarity.
    """
    projected = ops.linear(out.stage_tokens[3].tokens, proj.w, proj.b)
    tokens = ops.l2_normalize_rows(projected)
    sim = ops.matmul(tokens, Tensor(emb.vectors.T))              # (N4, C)
    patch_sim = apply_ups_chain(out.chain, 4, 1, sim).data       # (N1, C)

    pooled = projected.data.mean(axis=0)                         # pool, then normalize
    pooled = pooled / max(float(np.linalg.norm(pooled)), 1e-12)
    pooled_sim = emb.vectors @ pooled                            # (C,)
    max_sim = sim.data.max(axis=0)
    blended = 0.5 * (pooled_sim + max_sim)

    h1, w1 = out.stage_tokens[0].h, out.stage_tokens[0].w
    arg = patch_sim.argmax(axis=1)
    if not emb.background:
        return ZeroShotResult(arg.reshape(h1, w1), patch_sim, blended, None)

    k = min(emb.top_k, blended.size)
    top = np.sort(blended)[-k:]
    threshold = float(top.mean() + top.std())                    # population std
    labels = np.where(patch_sim.max(axis=1) >= threshold, arg + 1, 0)
    return ZeroShotResult(labels.reshape(h1, w1), patch_sim, blended, threshold)


# --- panoptic head ------------------------------------------------------------

@dataclass
class PanopticHeadParams:
    """Thing-classification MLP over candidate tokens plus the projection used
    for stage-3 mask refinement."""

    n_thing_classes: int
    k_candidates: int
    tensors: dict[str, Tensor]

    def __getattr__(self, name):
        tensors = object.__getattribute__(self, "tensors")
        try:
            return tensors[name]
        except KeyError:
            raise AttributeError(name) from None

    def named_tensors(self, prefix: str = "pan."):
        for n, t in self.tensors.items():
            yield prefix + n, t

    @property
    def no_object_index(self) -> int:
        return self.n_thing_classes


def init_panoptic_head(rng: Rng, d3: int, d4: int, n_thing_classes: int,
                       k_candidates: int = 100,
                       hidden: int = SEMANTIC_HIDDEN) -> PanopticHeadParams:
    shapes = _mlp_shapes("thing", d4, hidden, n_thing_classes + 1) \
        + [("refine_w", (d4, d3)), ("refine_b", (d3,))]
    tensors = {}
    for name, shape in shapes:
        data = np.zeros(shape) if name.endswith(("b1", "b2", "_b")) \
            else rng.trunc_normal(shape, std=0.02)
        tensors[name] = parameter(data, "pan." + name)
    return PanopticHeadParams(n_thing_classes, k_candidates, tensors)


def candidate_mass(chain: AssignmentChain) -> np.ndarray:
    """Soft pixel support of each final token: column sums of composed a_ups."""
    return compose_ups(chain, chain.n_stages, 1).sum(axis=0)


def panoptic_candidates(chain: AssignmentChain, k: int = 100) -> np.ndarray:
    """Final-token indices ordered by descending assignment mass, ties toward
    the lower index; first k returned (clamped to the token count)."""
    mass = candidate_mass(chain)
    order = np.argsort(-mass, kind="stable")
    return order[:min(k, mass.size)]


def panoptic_refine(candidates: np.ndarray, out: BackboneOutput,
                    head: PanopticHeadParams) -> Tensor:
    """Per-candidate soft masks at stage-3 resolution.

    Final tokens are projected to the stage-3 width; their upsampled
    projection is added to stage-3 tokens as global context, and the
    assignment is recomputed as a row softmax over candidates.
    """
    if len(candidates) == 0:
        raise UsageError("panoptic_refine needs at least one candidate")
    proj4 = ops.linear(out.stage_tokens[3].tokens, head.refine_w, head.refine_b)
    ctx = out.chain.link(4).apply_ups(proj4)                     # (N3, d3)
    base = ops.add(out.stage_tokens[2].tokens, ctx)
    cand = ops.gather_rows(proj4, np.asarray(candidates))        # (K, d3)
    logits = ops.matmul(base, ops.transpose(cand))               # (N3, K)
    return ops.softmax_rows(logits)


def thing_logits(candidates: np.ndarray, out: BackboneOutput,
                 head: PanopticHeadParams) -> Tensor:
    """(K, T+1) classification logits of candidate tokens (last = no-object)."""
    cand = ops.gather_rows(out.stage_tokens[3].tokens, np.asarray(candidates))
    return ops.mlp_2layer(cand, head.thing_w1, head.thing_b1,
                          head.thing_w2, head.thing_b2)


def panoptic_merge(semantic_logits: np.ndarray, instance_masks: np.ndarray,
                   thing_probs: np.ndarray, thing_class_ids: np.ndarray,
                   confidence: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic merge into one (class, instance-id) pair per patch.

    Stuff labels come from the semantic argmax.  A patch becomes a thing when
    the candidate holding its maximal mask weight has class confidence above
    the threshold; instance ids follow candidate order, starting at 1.
    """
    sem = np.asarray(semantic_logits).argmax(axis=1)
    masks = np.asarray(instance_masks)
    if masks.shape[0] != sem.shape[0]:
        raise UsageError(
            f"geometry mismatch: {masks.shape[0]} mask rows vs {sem.shape[0]} patches")
    probs = np.asarray(thing_probs)
    kept = probs[:, :-1].max(axis=1) > confidence
    cand_class = thing_class_ids[probs[:, :-1].argmax(axis=1)]

    class_map = sem.copy()
    instance_map = np.zeros_like(sem)
    if masks.shape[1] and kept.any():
        winner = masks.argmax(axis=1)
        claim = kept[winner]
        class_map[claim] = cand_class[winner[claim]]
        instance_map[claim] = winner[claim] + 1
    return class_map, instance_map


def save_panoptic_map(path: str, class_map: np.ndarray, instance_map: np.ndarray,
                      h: int, w: int) -> None:
    """Serialize a merged panoptic map as a two-channel 16-bit image."""
    from .imageio import write_pam2_16
    write_pam2_16(path, np.asarray(class_map).reshape(h, w),
                  np.asarray(instance_map).reshape(h, w))
