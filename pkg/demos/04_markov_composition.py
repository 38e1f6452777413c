"""Assignment matrices compose like a Markov chain.

Each a_ups is row-stochastic, so products of consecutive links are too, and
features at any stage can be pushed up (or down, via transposed a_down
products) to any other stage.  This script verifies the algebra numerically
on a real forward pass.

Run:  python demos/04_markov_composition.py
"""

import numpy as np

from groupseg.assignment import apply_ups_chain, compose_down, compose_ups
from groupseg.backbone import backbone_forward, init_backbone_params, variant_config
from groupseg.heads import candidate_mass
from groupseg.tensor import Rng, Tensor

params = init_backbone_params(Rng(3), variant_config("toy"))
out = backbone_forward(Rng(4).uniform((64, 64, 3)), params, eps=0.0)
chain = out.chain

print("== composed upsampling maps ==")
for frm, to in ((2, 1), (3, 1), (4, 1), (4, 2), (4, 3)):
    comp = compose_ups(chain, frm, to)
    print(f"stage {frm} -> {to}: {str(comp.shape):>12}, "
          f"row-sum err {np.abs(comp.sum(axis=1) - 1).max():.1e}")

print("\n== composed vs sequential application ==")
y = Rng(5).normal((4, 6))  # stage-4 features, 6 channels
comp = compose_ups(chain, 4, 1)
seq = apply_ups_chain(chain, 4, 1, Tensor(y)).data
print(f"max |composed@y - sequential| = {np.abs(comp @ y - seq).max():.2e}")

print("\n== downsampling direction ==")
down = compose_down(chain, 1, 4)
ones = down @ np.ones(down.shape[1])
print(f"stage 1 -> 4 map: {down.shape}, transported mass per token "
      f"in [{ones.min():.6f}, {ones.max():.6f}] (exactly 1 conserves mass)")

print("\n== token support ==")
mass = candidate_mass(chain)
print(f"soft patch support per final token: {np.round(mass, 2)}")
print(f"total {mass.sum():.6f} == number of patches {chain.links[0].n_in}")

print("\n== simplex preservation ==")
probs = np.eye(4)[Rng(6).integers(0, 4, (4,))]  # one-hot class rows per token
up = compose_ups(chain, 4, 1) @ probs
print(f"upsampled class rows stay on the simplex: sums in "
      f"[{up.sum(axis=1).min():.9f}, {up.sum(axis=1).max():.9f}], "
      f"min entry {up.min():.2e}")
