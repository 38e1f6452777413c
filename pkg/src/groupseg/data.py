"""Deterministic synthetic-shapes dataset.

Each sample is a textured background with 1..max_shapes flat-colored
axis-aligned rectangles and circles; later shapes occlude earlier ones.
Semantic and instance annotations are exact by construction: class identity
is carried by color, so the task is learnable from local appearance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng

# class 0 is background; classes 1..3 carry well-separated base colors
CLASS_COLORS = np.array([
    [0.46, 0.45, 0.43],
    [0.85, 0.20, 0.18],
    [0.18, 0.75, 0.25],
    [0.20, 0.30, 0.88],
    [0.90, 0.80, 0.15],
    [0.70, 0.20, 0.80],
])


@dataclass
class SynthSample:
    image: np.ndarray       # (h, w, 3) float in [0, 1]
    semantic: np.ndarray    # (h, w) int class id, 0 = background
    instances: list[tuple[int, np.ndarray]]  # (class id, bool mask), disjoint

    @property
    def shape(self) -> tuple[int, int]:
        return self.semantic.shape


def synth_shapes(seed: int, h: int = 64, w: int = 64, max_shapes: int = 3,
                 n_classes: int = 4) -> SynthSample:
    """Deterministic sample for `seed`; identical seeds give identical bytes."""
    if h % 32 or w % 32:
        raise ValueError(f"dims must be divisible by 32, got {h}x{w}")
    if not 2 <= n_classes <= len(CLASS_COLORS):
        raise ValueError(f"n_classes must be in [2, {len(CLASS_COLORS)}]")
    rng = Rng(seed, stream=0x5afe)
    image = CLASS_COLORS[0] + rng.normal((h, w, 3), std=0.02)
    image += 0.04 * np.linspace(-1, 1, w)[None, :, None] * rng.uniform((), -1, 1)
    semantic = np.zeros((h, w), dtype=np.int64)
    owner = np.full((h, w), -1, dtype=np.int64)

    yy, xx = np.mgrid[0:h, 0:w]
    n_shapes = int(rng.integers(1, max_shapes + 1))
    classes = []
    for s in range(n_shapes):
        cls = int(rng.integers(1, n_classes))
        classes.append(cls)
        kind = int(rng.integers(0, 2))
        if kind == 0:  # rectangle
            sh = int(rng.integers(14, min(40, h - 8) + 1))
            sw = int(rng.integers(14, min(40, w - 8) + 1))
            top = int(rng.integers(2, h - sh - 1))
            left = int(rng.integers(2, w - sw - 1))
            mask = (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
        else:  # circle
            r = int(rng.integers(8, min(16, h // 4) + 1))
            cy = int(rng.integers(r + 1, h - r - 1))
            cx = int(rng.integers(r + 1, w - r - 1))
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        color = CLASS_COLORS[cls] + rng.normal((3,), std=0.02)
        image[mask] = color + rng.normal((int(mask.sum()), 3), std=0.01)
        semantic[mask] = cls
        owner[mask] = s

    instances = []
    for s, cls in enumerate(classes):
        m = owner == s
        if m.any():
            instances.append((cls, m))
    return SynthSample(np.clip(image, 0.0, 1.0), semantic, instances)


def semantic_to_patches(semantic: np.ndarray, patch: int = 4) -> np.ndarray:
    """Majority class per patch (stride-`patch` grid), ties to the lower id."""
    h, w = semantic.shape
    blocks = semantic.reshape(h // patch, patch, w // patch, patch)
    blocks = blocks.transpose(0, 2, 1, 3).reshape(h // patch, w // patch, patch * patch)
    n_classes = int(semantic.max()) + 1
    counts = np.stack([(blocks == c).sum(axis=-1) for c in range(n_classes)], axis=-1)
    return counts.argmax(axis=-1)


def mask_to_grid(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Mean-pool a pixel mask onto a coarse grid, thresholded at 0.5."""
    h, w = mask.shape
    fh, fw = h // grid_h, w // grid_w
    pooled = mask.reshape(grid_h, fh, grid_w, fw).mean(axis=(1, 3))
    return (pooled >= 0.5).astype(np.float64)
