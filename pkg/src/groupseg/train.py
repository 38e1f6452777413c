"""Desk-scale training: AdamW-style optimizer, task losses, and the fit loop.

Training is deterministic given (seed, data): batches draw from a seeded
stream, gradients accumulate over independent per-sample tapes, global
gradient norm is clipped at 1.0, and updates use decoupled weight decay.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .backbone import (BackboneParams, backbone_forward, classification_logits,
                       init_backbone_params, init_classifier_head, variant_config)
from .data import SynthSample, mask_to_grid, semantic_to_patches
from .errors import ConfigError, NumericError
from .heads import (PanopticHeadParams, SemanticHeadParams, init_panoptic_head,
                    init_semantic_head, panoptic_candidates, panoptic_refine,
                    semantic_aux_logits, semantic_segment, thing_logits)
from .losses import (PanopticLossWeights, cross_entropy, mean_iou,
                     panoptic_training_loss, pixel_accuracy)
from .tensor import Rng, Tape, Tensor, zero_grads

AUX_LOSS_WEIGHT = 1.0
GRAD_CLIP_NORM = 1.0


@dataclass
class AdamW:
    """Adaptive moments with decoupled weight decay.

    Decay applies to tensors of rank >= 2 only (biases, norms, scalar
    temperatures, and bias tables are exempt, following common practice).
    """

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_steps: int = 0
    step_count: int = 0
    _m: dict[int, np.ndarray] = field(default_factory=dict)
    _v: dict[int, np.ndarray] = field(default_factory=dict)

    def step(self, params: list) -> None:
        self.step_count += 1
        lr = self.lr
        if self.warmup_steps and self.step_count <= self.warmup_steps:
            lr = self.lr * self.step_count / self.warmup_steps
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p in params:
            if p.grad is None:
                continue
            key = id(p)
            m = self._m.get(key)
            if m is None:
                m = self._m[key] = np.zeros_like(p.data)
                self._v[key] = np.zeros_like(p.data)
            v = self._v[key]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


def clip_grad_norm(params: list, max_norm: float = GRAD_CLIP_NORM) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        s = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return norm


@dataclass
class SegModel:
    backbone: BackboneParams
    semantic: SemanticHeadParams | None = None
    panoptic: PanopticHeadParams | None = None
    classifier: object | None = None

    def parameters(self) -> list[Tensor]:
        params = self.backbone.parameters()
        for head in (self.semantic, self.panoptic, self.classifier):
            if head is not None:
                params += [t for _, t in head.named_tensors()]
        return params

    def named_tensors(self):
        yield from self.backbone.named_tensors()
        for head in (self.semantic, self.panoptic, self.classifier):
            if head is not None:
                yield from head.named_tensors()


def build_model(seed: int, variant: str = "toy", n_classes: int = 4,
                task: str = "semantic", n_thing_classes: int | None = None,
                k_candidates: int = 100, config=None) -> SegModel:
    rng = Rng(seed)
    cfg = config if config is not None else variant_config(variant)
    backbone = init_backbone_params(rng.child(1), cfg)
    d3, d4 = cfg.stages[2].dim, cfg.stages[3].dim
    model = SegModel(backbone)
    if task in ("semantic", "panoptic"):
        model.semantic = init_semantic_head(rng.child(2), d3, d4, n_classes)
    if task == "panoptic":
        things = n_thing_classes if n_thing_classes is not None else n_classes - 1
        model.panoptic = init_panoptic_head(rng.child(3), d3, d4, things, k_candidates)
    if task == "classification":
        model.classifier = init_classifier_head(rng.child(4), d4, n_classes)
    return model


# --- per-sample task losses ----------------------------------------------------

def semantic_loss(model: SegModel, sample: SynthSample, sparse: bool = True,
                  with_aux: bool = True):
    """Per-pixel cross-entropy of bilinearly upsampled patch logits, plus the
    stage-3 auxiliary loss during training."""
    out = backbone_forward(sample.image, model.backbone, sparse=sparse)
    h1, w1 = out.stage_tokens[0].h, out.stage_tokens[0].w
    n_cls = model.semantic.n_classes
    target = sample.semantic.reshape(-1)

    logits = semantic_segment(out, model.semantic)               # (N1, C)
    up = ops.upsample_bilinear(ops.reshape(logits, (h1, w1, n_cls)), 4)
    loss = cross_entropy(ops.reshape(up, (-1, n_cls)), target)
    if with_aux:
        aux = semantic_aux_logits(out, model.semantic)
        aux_up = ops.upsample_bilinear(ops.reshape(aux, (h1, w1, n_cls)), 4)
        loss = ops.add(loss, ops.scale(
            cross_entropy(ops.reshape(aux_up, (-1, n_cls)), target), AUX_LOSS_WEIGHT))
    return loss, up


def predict_semantic(model: SegModel, sample: SynthSample, sparse: bool = True
                     ) -> np.ndarray:
    _, up = semantic_loss(model, sample, sparse=sparse, with_aux=False)
    return up.data.argmax(axis=-1).reshape(sample.shape)


def classification_loss(model: SegModel, image: np.ndarray, label: int,
                        sparse: bool = True):
    out = backbone_forward(image, model.backbone, sparse=sparse)
    logits = classification_logits(out.pooled, model.classifier)
    loss = cross_entropy(ops.reshape(logits, (1, -1)), np.asarray([label]))
    return loss, logits


def panoptic_loss(model: SegModel, sample: SynthSample, sparse: bool = True,
                  weights: PanopticLossWeights = PanopticLossWeights()):
    """Semantic CE plus bipartite-matched instance losses, averaged over the
    final stage's intermediate block outputs (deep supervision)."""
    out = backbone_forward(sample.image, model.backbone, sparse=sparse,
                           keep_intermediates=True)
    sem_loss, up = semantic_loss_from_output(model, out, sample)

    g3 = out.stage_tokens[2]
    gt_classes = np.asarray([c - 1 for c, _ in sample.instances])  # thing ids drop bg
    gt_masks = np.stack([mask_to_grid(m, g3.h, g3.w) for _, m in sample.instances]) \
        if sample.instances else np.zeros((0, g3.n))
    candidates = panoptic_candidates(out.chain, model.panoptic.k_candidates)

    inst_terms = []
    versions = out.stage4_intermediates or [out.stage_tokens[3]]
    for tokens in versions:
        variant = _replace_stage4(out, tokens)
        cl = thing_logits(candidates, variant, model.panoptic)
        masks = panoptic_refine(candidates, variant, model.panoptic)
        inst_terms.append(panoptic_training_loss(
            cl, masks, gt_classes, gt_masks, model.panoptic.no_object_index, weights))
    inst = inst_terms[0]
    for t in inst_terms[1:]:
        inst = ops.add(inst, t)
    inst = ops.scale(inst, 1.0 / len(inst_terms))
    return ops.add(sem_loss, inst), up


def semantic_loss_from_output(model: SegModel, out, sample: SynthSample):
    h1, w1 = out.stage_tokens[0].h, out.stage_tokens[0].w
    n_cls = model.semantic.n_classes
    logits = semantic_segment(out, model.semantic)
    up = ops.upsample_bilinear(ops.reshape(logits, (h1, w1, n_cls)), 4)
    return cross_entropy(ops.reshape(up, (-1, n_cls)), sample.semantic.reshape(-1)), up


def _replace_stage4(out, tokens):
    from .backbone import BackboneOutput
    st = list(out.stage_tokens)
    st[3] = tokens
    return BackboneOutput(st, out.chain, out.pooled, out.stage4_intermediates)


# --- fit loop --------------------------------------------------------------------

@dataclass
class FitReport:
    steps: int
    final_loss: float
    metric: float
    metric_name: str
    history: list[dict]


def fit(model: SegModel, dataset: list, task: str, steps: int,
        opt: AdamW | None = None, seed: int = 0, batch_size: int = 4,
        sparse: bool = True, log_path: str | None = None,
        eval_every: int = 100, eval_samples: int = 32,
        target_metric: float | None = None) -> FitReport:
    """Train `model` on `dataset`; deterministic given (seed, dataset).

    Aborts with NumericError (and the step index) if the loss goes non-finite.
    Early-stops once `target_metric` is reached at an evaluation point.
    """
    if task not in ("semantic", "panoptic", "classification"):
        raise ConfigError(f"unknown task {task!r}")
    opt = opt or AdamW()
    params = model.parameters()
    order_rng = Rng(seed, stream=0xf17)
    history: list[dict] = []
    log_f = open(log_path, "w") if log_path else None
    metric_name = {"semantic": "pixel_accuracy", "panoptic": "pixel_accuracy",
                   "classification": "accuracy"}[task]

    def one_loss(sample):
        if task == "semantic":
            return semantic_loss(model, sample, sparse=sparse)[0]
        if task == "panoptic":
            return panoptic_loss(model, sample, sparse=sparse)[0]
        image, label = sample
        return classification_loss(model, image, label, sparse=sparse)[0]

    def evaluate() -> float:
        idx = np.linspace(0, len(dataset) - 1, min(eval_samples, len(dataset))).astype(int)
        if task == "classification":
            hits = []
            for i in idx:
                image, label = dataset[i]
                _, logits = classification_loss(model, image, label, sparse=sparse)
                hits.append(int(logits.data.argmax()) == label)
            return float(np.mean(hits))
        accs = []
        for i in idx:
            pred = predict_semantic(model, dataset[i], sparse=sparse)
            accs.append(pixel_accuracy(pred, dataset[i].semantic))
        return float(np.mean(accs))

    metric = 0.0
    loss_val = float("nan")
    done_steps = 0
    for step in range(1, steps + 1):
        picks = order_rng.integers(0, len(dataset), (batch_size,))
        zero_grads(params)
        batch_loss = 0.0
        for i in picks:
            with Tape() as tape:
                loss = one_loss(dataset[int(i)])
            if not np.isfinite(loss.data):
                raise NumericError(f"loss went non-finite at step {step}")
            tape.backward(loss)
            batch_loss += loss.item()
        for p in params:
            if p.grad is not None:
                p.grad /= batch_size
        clip_grad_norm(params)
        opt.step(params)
        loss_val = batch_loss / batch_size
        done_steps = step

        if step % eval_every == 0 or step == steps:
            t0 = time.perf_counter()
            metric = evaluate()
            wall = (time.perf_counter() - t0) * 1000
            rec = {"step": step, "loss": loss_val, "metric": metric,
                   "wallclock_ms": round(wall, 3)}
            history.append(rec)
            if log_f:
                log_f.write(json.dumps(rec) + "\n")
                log_f.flush()
            if target_metric is not None and metric >= target_metric:
                break
        else:
            rec = {"step": step, "loss": loss_val}
            history.append(rec)
            if log_f:
                log_f.write(json.dumps(rec) + "\n")

    if log_f:
        log_f.close()
    return FitReport(done_steps, loss_val, metric, metric_name, history)


def train_miou(model: SegModel, dataset: list[SynthSample], n_classes: int,
               limit: int = 64, sparse: bool = True) -> float:
    """Mean IoU over (a subset of) the training set at pixel resolution."""
    idx = np.linspace(0, len(dataset) - 1, min(limit, len(dataset))).astype(int)
    preds = [predict_semantic(model, dataset[i], sparse=sparse) for i in idx]
    gts = [dataset[i].semantic for i in idx]
    return mean_iou(np.stack(preds), np.stack(gts), n_classes)
