"""A first look at the spatial grouping layer.

A grouping layer replaces uniform 2x downsampling: output tokens are seeded
by a strided convolution and then refined by iterating a soft, content-based
assignment of input tokens to output tokens.  This script builds one layer
on a toy feature map and inspects the two matrices it returns:

  a_ups  -- row-stochastic: P(input i belongs to output j)
  a_down -- column-stochastic: the weights that average inputs into outputs

Run:  python demos/01_grouping_layer.py
"""

import numpy as np

from groupseg.grouping import (TokenGrid, build_local_mask, grouping_forward,
                               grouping_init, grouping_iteration,
                               init_grouping_params)
from groupseg.tensor import Rng, Tensor

rng = Rng(0)

# an 8x8 grid of 3-channel tokens with two "objects": a bright square and a
# dark stripe on a noisy background
feat = rng.normal((8, 8, 3), std=0.1)
feat[1:4, 1:4] += 2.0
feat[5:7, :] -= 2.0
x = TokenGrid(Tensor(feat.reshape(64, 3)), 8, 8)

params = init_grouping_params(Rng(1), d_in=3, mode="local", iterations=3)

print("== locality mask ==")
mask = build_local_mask(8, 8)
counts = mask.valid.sum(axis=1)
print(f"inputs: {mask.n_in}, outputs: {mask.n_out}")
print(f"permitted outputs per input: min {counts.min()}, max {counts.max()}, "
      f"total stored entries {mask.entry_count()} (<= 9 per input)")

print("\n== iterating the layer by hand ==")
x_out = grouping_init(x, params)
for it in range(3):
    x_out, pair = grouping_iteration(x, x_out, params, mask)
    ups = pair.a_ups.data
    sharp = ups.max(axis=1).mean()
    print(f"iteration {it + 1}: mean row max of a_ups = {sharp:.3f} "
          f"(1.0 would be a hard assignment)")

print("\n== the returned pair ==")
out, pair = grouping_forward(x, params)
print(f"output grid: {out.h}x{out.w} with {out.d} channels "
      f"(half resolution, double width)")
print(f"a_ups rows sum to 1:    max |err| = "
      f"{np.abs(pair.a_ups.data.sum(axis=1) - 1).max():.2e}")
print(f"a_down columns sum to 1: max |err| = "
      f"{np.abs(pair.a_down.data.sum(axis=0) - 1).max():.2e}")

outside = pair.a_ups.data.copy()
rows = np.broadcast_to(np.arange(64)[:, None], (64, 9))
outside[rows[mask.valid], mask.neighbors[mask.valid]] = 0.0
print(f"assignment mass outside the 3x3 parent window: {outside.max()} (exact zero)")

print("\nhard groups of the 8x8 grid (argmax of a_ups):")
print(pair.a_ups.data.argmax(axis=1).reshape(8, 8))
