"""Hierarchical segmentation straight from the backbone.

Composing the per-stage assignment matrices gives a probabilistic map from
any stage's tokens back to the stride-4 patch grid; the argmax of a composed
map is a segment labeling.  No segmentation head is involved.  This script
runs an untrained toy backbone on a synthetic image and writes color group
maps for stages 2, 3, and 4.

Run:  python demos/03_hierarchical_segmentation.py
Outputs land in demos/out/.
"""

import os

import numpy as np

from groupseg.assignment import compose_ups, row_entropy, sparse_row_entropy, \
    stage_segmentations
from groupseg.backbone import backbone_forward, init_backbone_params, variant_config
from groupseg.data import synth_shapes
from groupseg.imageio import colorize_labels, write_ppm
from groupseg.tensor import Rng

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)

sample = synth_shapes(7, h=64, w=64, max_shapes=3)
write_ppm(os.path.join(out_dir, "input.ppm"),
          np.round(sample.image * 255).astype(np.uint8))

params = init_backbone_params(Rng(0), variant_config("toy"))
out = backbone_forward(sample.image, params)

print("stage grids:", [(g.h, g.w, g.d) for g in out.stage_tokens])
print("chain links:", [(l.n_in, l.n_out, "sparse" if l.sparse else "dense")
                       for l in out.chain.links])

comp = compose_ups(out.chain, 4, 1)
print(f"composed stage-4 -> patches map: {comp.shape}, "
      f"rows sum to 1 within {np.abs(comp.sum(axis=1) - 1).max():.1e}")

segs = stage_segmentations(out.chain, out.stage_tokens[0].h, out.stage_tokens[0].w)
for stage, seg in segs.items():
    path = os.path.join(out_dir, f"stage{stage}_groups.ppm")
    write_ppm(path, colorize_labels(seg.labels))
    print(f"stage {stage}: {seg.used_labels.size:3d} segments on the patch grid "
          f"-> {path}")

print("\nassignment sharpness per link (mean row entropy of a_ups, nats):")
for i, link in enumerate(out.chain.links):
    ent = sparse_row_entropy(link.pair[0]) if link.sparse \
        else row_entropy(link.pair.a_ups.data)
    cap = np.log(9) if link.sparse else np.log(link.n_out)
    print(f"  link {i + 1}: {ent:.3f} (cap {cap:.3f})")

print("\nNote: this backbone is untrained; groups follow low-level appearance.")
print("Train one with demos/05_train_semantic_toy.py to see them align to shapes.")
