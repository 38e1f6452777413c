"""Training the native semantic head on synthetic shapes.

The semantic head is just a 2-layer MLP on final tokens; per-patch logits
come from pushing the MLP outputs through the learned assignment chain, and
the per-pixel loss trains the whole stack end to end (grouping layers
included).  This is a shortened run; the acceptance suite trains the full
512-image task to >=95% pixel accuracy.

Run:  python demos/05_train_semantic_toy.py          (~1.5 minutes on a laptop)
Outputs land in demos/out/.
"""

import os

import numpy as np

from groupseg.data import synth_shapes
from groupseg.imageio import colorize_labels, write_ppm
from groupseg.losses import pixel_accuracy
from groupseg.tensor import Rng
from groupseg.train import (AdamW, build_model, fit, predict_semantic,
                            train_miou)
from groupseg.weights import save_weights

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)

dataset = [synth_shapes(i, h=64, w=64, max_shapes=2) for i in range(96)]
model = build_model(0, "toy", n_classes=4, task="semantic")

print("training 350 steps on 96 images (batch 8, lr 1e-3) ...")
report = fit(model, dataset, "semantic", steps=350,
             opt=AdamW(lr=1e-3, warmup_steps=50), seed=0, batch_size=8,
             eval_every=50, eval_samples=24,
             log_path=os.path.join(out_dir, "train_log.jsonl"))
for rec in report.history:
    if "metric" in rec:
        print(f"  step {rec['step']:4d}: loss {rec['loss']:.3f}  "
              f"pixel acc {rec['metric']:.3f}")

miou = train_miou(model, dataset, 4, limit=48)
print(f"\nfinal: pixel accuracy {report.metric:.3f}, mIoU {miou:.3f}")

sample = dataset[0]
pred = predict_semantic(model, sample)
print(f"sample 0 accuracy: {pixel_accuracy(pred, sample.semantic):.3f}")
write_ppm(os.path.join(out_dir, "train_input.ppm"),
          np.round(sample.image * 255).astype(np.uint8))
write_ppm(os.path.join(out_dir, "train_pred.ppm"),
          colorize_labels(pred, zero_gray=True))
write_ppm(os.path.join(out_dir, "train_gt.ppm"),
          colorize_labels(sample.semantic, zero_gray=True))
save_weights(os.path.join(out_dir, "toy_semantic.nsvt"),
             list(model.named_tensors()))
print(f"wrote predictions and weights under {out_dir}/")
