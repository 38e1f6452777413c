"""The block-sparse execution path against the dense reference.

The dense path materializes the full N_in x N_out assignment with an
additive mask; the sparse path stores at most 9 weights per input and
computes only those.  Both implement the same layer: this script checks the
agreement numerically and times them side by side.

Tip: run with NSVT_THREADS=1 for stable timings.

Run:  python demos/02_sparse_vs_reference.py
"""

import time

import numpy as np

from groupseg.grouping import TokenGrid, grouping_forward, init_grouping_params
from groupseg.sparse import make_workspace, sparse_grouping_forward
from groupseg.tensor import Rng, Tensor

params = init_grouping_params(Rng(0), d_in=16, mode="local", iterations=3)

print("== equivalence (16x16 grid, L=3) ==")
x = TokenGrid(Tensor(Rng(1).normal((256, 16))), 16, 16)
ref_out, ref_pair = grouping_forward(x, params)
sp_out, (sp_ups, sp_down) = sparse_grouping_forward(x, params, eps=0.0)
print(f"outputs:  max |diff| = {np.abs(ref_out.tokens.data - sp_out.tokens.data).max():.2e}")
print(f"a_ups:    max |diff| = {np.abs(ref_pair.a_ups.data - sp_ups.to_dense()).max():.2e}")
print(f"a_down:   max |diff| = {np.abs(ref_pair.a_down.data - sp_down.to_dense()).max():.2e}")

print("\n== storage ==")
for side in (16, 64, 128):
    ws = make_workspace(side, side)
    dense_entries = (side * side) * (side * side // 4)
    print(f"{side:>4}x{side:<4} stored {ws.mask.entry_count():>9} entries "
          f"(dense would be {dense_entries:>12})")

print("\n== wall time, median of 5 (sparse should scale ~linearly) ==")
prev = None
for side in (32, 64, 128):
    xs = TokenGrid(Tensor(Rng(2).normal((side * side, 16))), side, side)
    times = []
    for _ in range(5):
        t0 = time.perf_counter()
        sparse_grouping_forward(xs, params)
        times.append((time.perf_counter() - t0) * 1000)
    med = float(np.median(times))
    note = f"  ({med / prev:.2f}x the previous size)" if prev else ""
    print(f"sparse {side:>4}^2: {med:8.1f} ms{note}")
    prev = med
