"""Four-stage hierarchical encoder with grouping-based downsampling.

Stages process tokens at strides 4/8/16/32 with window self-attention
blocks; consecutive stages are connected by grouping layers (local, local,
dense).  The forward pass returns all stage token grids, the assignment
chain linking them, and mean-pooled final tokens for classification.

Replacing a grouping layer with its plain strided-conv seed (the uniform
baseline) is a config toggle; shapes are unchanged and the chain link
degrades to the one-hot parent partition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import ops
from .assignment import AssignmentChain, ChainLink
from .errors import ConfigError, ShapeError
from .grouping import (AssignmentPair, GroupingLayerParams, TokenGrid,
                       grouping_forward, grouping_init, grouping_param_shapes,
                       init_grouping_params)
from .sparse import sparse_grouping_forward
from .tensor import Rng, Tensor, parameter


@dataclass
class StageConfig:
    depth: int
    dim: int
    mlp_ratio: float
    attn_window: int

    @property
    def heads(self) -> int:
        return max(1, self.dim // 32)


@dataclass
class BackboneConfig:
    stages: tuple[StageConfig, StageConfig, StageConfig, StageConfig]
    grouping_modes: tuple[str, str, str] = ("local", "local", "dense")
    iterations: int = 3
    variant: str = "custom"
    max_input: int = 224
    # ablation toggles: disabled links fall back to the strided-conv seed
    group_enabled: tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self):
        dims = [s.dim for s in self.stages]
        for a, b in zip(dims, dims[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage dims must double, got {dims}")
        if self.max_input % 32:
            raise ConfigError("max_input must be divisible by 32")

    def stage_grid(self, i: int, h: int, w: int) -> tuple[int, int]:
        """Grid of stage i (1-based) for an h x w input: (H/2^(i+1), W/2^(i+1))."""
        return h // (2 ** (i + 1)), w // (2 ** (i + 1))


def variant_config(name: str) -> BackboneConfig:
    table = {
        "tiny": ((64, 128, 256, 512), (3, 4, 18, 5), 3.0, 7, 224),
        "base": ((128, 256, 512, 1024), (3, 4, 18, 5), 2.0, 7, 224),
        "large": ((192, 384, 768, 1536), (3, 4, 18, 5), 2.0, 7, 224),
        "toy": ((8, 16, 32, 64), (1, 1, 1, 1), 2.0, 4, 64),
    }
    if name not in table:
        raise ConfigError(f"unknown variant {name!r}; pick from {sorted(table)}")
    dims, depths, ratio, window, max_input = table[name]
    stages = tuple(StageConfig(d, c, ratio, window) for c, d in zip(dims, depths))
    return BackboneConfig(stages=stages, variant=name, max_input=max_input)


# --- parameter declaration -------------------------------------------------

def _block_shapes(dim: int, ratio: float, window: int, heads: int) -> list[tuple[str, tuple]]:
    hidden = int(round(ratio * dim))
    span = 2 * window - 1
    return [
        ("ln1_g", (dim,)), ("ln1_b", (dim,)),
        ("qkv_w", (dim, 3 * dim)), ("qkv_b", (3 * dim,)),
        ("proj_w", (dim, dim)), ("proj_b", (dim,)),
        ("rbias", (span * span, heads)),
        ("ln2_g", (dim,)), ("ln2_b", (dim,)),
        ("mlp_w1", (dim, hidden)), ("mlp_b1", (hidden,)),
        ("mlp_w2", (hidden, dim)), ("mlp_b2", (dim,)),
    ]


def backbone_param_shapes(config: BackboneConfig) -> list[tuple[str, tuple]]:
    """Flat (name, shape) declaration of every backbone learnable."""
    d1 = config.stages[0].dim
    shapes: list[tuple[str, tuple]] = [
        ("patch.conv_w", (4, 4, 3, d1)), ("patch.conv_b", (d1,)),
        ("patch.ln_g", (d1,)), ("patch.ln_b", (d1,)),
    ]
    for i, st in enumerate(config.stages, start=1):
        for b in range(st.depth):
            shapes += [(f"stage{i}.block{b}.{n}", s)
                       for n, s in _block_shapes(st.dim, st.mlp_ratio, st.attn_window,
                                                 st.heads)]
        if i < 4:
            g_in = config.stage_grid(i, config.max_input, config.max_input)
            shapes += [(f"group{i + 1}.{n}", s)
                       for n, s in grouping_param_shapes(
                           st.dim, st.mlp_ratio, config.grouping_modes[i - 1],
                           max_h_in=g_in[0], max_w_in=g_in[1])]
    d4 = config.stages[3].dim
    shapes += [("final.ln_g", (d4,)), ("final.ln_b", (d4,))]
    return shapes


def count_params(config: BackboneConfig, n_classes: int = 1000
                 ) -> tuple[int, dict[str, int]]:
    """Learnable-scalar count of the assembled model plus per-module breakdown."""
    breakdown: dict[str, int] = {}
    for name, shape in backbone_param_shapes(config):
        module = name.split(".")[0]
        breakdown[module] = breakdown.get(module, 0) + int(np.prod(shape, dtype=np.int64))
    if n_classes:
        breakdown["head"] = config.stages[3].dim * n_classes + n_classes
    return sum(breakdown.values()), breakdown


@dataclass
class BlockParams:
    tensors: dict[str, Tensor]

    def __getattr__(self, name):
        tensors = object.__getattribute__(self, "tensors")
        try:
            return tensors[name]
        except KeyError:
            raise AttributeError(name) from None


@dataclass
class BackboneParams:
    config: BackboneConfig
    tensors: dict[str, Tensor]            # flat name -> tensor
    blocks: list[list[BlockParams]]       # [stage][block]
    groupings: list[GroupingLayerParams]  # links into stages 2, 3, 4

    def named_tensors(self):
        yield from self.tensors.items()

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())


def init_backbone_params(rng: Rng, config: BackboneConfig,
                         init_std: float = 0.02) -> BackboneParams:
    tensors: dict[str, Tensor] = {}
    for name, shape in backbone_param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "log_tau":
            data = np.asarray(np.log(1.0 / np.sqrt(shape[0] if shape else 1)))
        elif leaf.endswith("_g"):
            data = np.ones(shape)
        elif leaf.endswith(("_b", "_b1", "_b2")):
            data = np.zeros(shape)
        else:
            data = rng.trunc_normal(shape, std=init_std)
        tensors[name] = parameter(data, name)

    blocks = []
    for i, st in enumerate(config.stages, start=1):
        stage_blocks = []
        for b in range(st.depth):
            prefix = f"stage{i}.block{b}."
            stage_blocks.append(BlockParams(
                {n[len(prefix):]: t for n, t in tensors.items() if n.startswith(prefix)}))
        blocks.append(stage_blocks)

    groupings = []
    for i in range(1, 4):
        st = config.stages[i - 1]
        prefix = f"group{i + 1}."
        g_in = config.stage_grid(i, config.max_input, config.max_input)
        sub = {n[len(prefix):]: t for n, t in tensors.items() if n.startswith(prefix)}
        gp = GroupingLayerParams(
            d_in=st.dim, d_out=2 * st.dim, mode=config.grouping_modes[i - 1],
            iterations=config.iterations, mlp_ratio=st.mlp_ratio,
            max_h_in=g_in[0], max_w_in=g_in[1], tensors=sub)
        gp.tensors["log_tau"].data = np.asarray(np.log(1.0 / np.sqrt(gp.d_out)))
        groupings.append(gp)
    return BackboneParams(config, tensors, blocks, groupings)


# --- window attention encoder block -----------------------------------------

def _effective_window(side: int, window: int) -> int:
    """Largest divisor of `side` not exceeding `window` (full side if smaller)."""
    if side <= window:
        return side
    w = window
    while side % w:
        w -= 1
    return w


@lru_cache(maxsize=128)
def _window_bias_index(ewh: int, eww: int, window: int) -> np.ndarray:
    """(T, T) flat index into the (2*window-1)^2 relative bias table."""
    span = 2 * window - 1
    r = np.arange(ewh)
    c = np.arange(eww)
    pr = np.repeat(r, eww)
    pc = np.tile(c, ewh)
    dr = pr[:, None] - pr[None, :] + window - 1
    dc = pc[:, None] - pc[None, :] + window - 1
    return dr * span + dc


def encoder_block(x: TokenGrid, p: BlockParams, window: int, heads: int) -> TokenGrid:
    """Pre-norm window self-attention with relative bias, then pre-norm MLP."""
    h, w, d = x.h, x.w, x.d
    ewh = _effective_window(h, window)
    eww = _effective_window(w, window)
    t = ewh * eww
    nwin = (h // ewh) * (w // eww)
    dh = d // heads

    xn = ops.layer_norm(x.tokens, p.ln1_g, p.ln1_b)
    qkv = ops.linear(xn, p.qkv_w, p.qkv_b)                      # (N, 3d)
    g = ops.reshape(qkv, (h // ewh, ewh, w // eww, eww, 3, heads, dh))
    g = ops.transpose_axes(g, (4, 0, 2, 5, 1, 3, 6))            # (3, nh, nw, heads, ewh, eww, dh)
    g = ops.reshape(g, (3, nwin * heads, t, dh))
    q = ops.reshape(ops.gather_rows(g, np.array([0])), (nwin * heads, t, dh))
    k = ops.reshape(ops.gather_rows(g, np.array([1])), (nwin * heads, t, dh))
    v = ops.reshape(ops.gather_rows(g, np.array([2])), (nwin * heads, t, dh))

    attn = ops.scale(ops.bmm(q, ops.transpose_axes(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    bias = ops.gather_rows(p.rbias, _window_bias_index(ewh, eww, window))  # (T,T,heads)
    bias = ops.reshape(ops.transpose_axes(bias, (2, 0, 1)), (heads, t, t))
    attn = ops.reshape(attn, (nwin, heads, t, t))
    attn = ops.add(attn, bias)
    attn = ops.softmax_rows(attn)
    attn = ops.reshape(attn, (nwin * heads, t, t))
    out = ops.bmm(attn, v)                                      # (nwin*heads, T, dh)
    out = ops.reshape(out, (h // ewh, w // eww, heads, ewh, eww, dh))
    out = ops.transpose_axes(out, (0, 3, 1, 4, 2, 5))           # (nh, ewh, nw, eww, heads, dh)
    out = ops.reshape(out, (h * w, d))
    out = ops.linear(out, p.proj_w, p.proj_b)

    x1 = ops.add(x.tokens, out)
    mlp = ops.mlp_2layer(ops.layer_norm(x1, p.ln2_g, p.ln2_b),
                         p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2)
    return TokenGrid(ops.add(x1, mlp), h, w)


# --- full forward ------------------------------------------------------------

def patch_embed(image: Tensor, params: BackboneParams) -> TokenGrid:
    """4x4 stride-4 convolution + LN: (H, W, 3) -> (H/4 * W/4, d1) tokens."""
    h, w, c = image.shape
    if h % 32 or w % 32:
        raise ConfigError(f"input dims must be divisible by 32, got {h}x{w}")
    if c != 3:
        raise ShapeError(f"expected 3 input channels, got {c}")
    conv = ops.strided_conv2d(image, params.tensors["patch.conv_w"],
                              params.tensors["patch.conv_b"], stride=4, pad=0)
    flat = ops.reshape(conv, (h // 4 * (w // 4), conv.shape[-1]))
    tokens = ops.layer_norm(flat, params.tensors["patch.ln_g"], params.tensors["patch.ln_b"])
    return TokenGrid(tokens, h // 4, w // 4)


def _parent_onehot_pair(h_in: int, w_in: int) -> AssignmentPair:
    """Uniform-downsampling stand-in: each input assigned to its parent cell."""
    h_out, w_out = h_in // 2, w_in // 2
    rr, cc = np.meshgrid(np.arange(h_in), np.arange(w_in), indexing="ij")
    j = (rr // 2) * w_out + (cc // 2)
    ups = np.zeros((h_in * w_in, h_out * w_out))
    ups[np.arange(h_in * w_in), j.reshape(-1)] = 1.0
    return AssignmentPair(Tensor(ups), Tensor(ups * 0.25), "local")


@dataclass
class BackboneOutput:
    stage_tokens: list[TokenGrid]            # after each stage's blocks
    chain: AssignmentChain
    pooled: Tensor                           # (d4,) mean of LN'd final tokens
    stage4_intermediates: list[TokenGrid] = field(default_factory=list)


def backbone_forward(image, params: BackboneParams, sparse: bool = True,
                     keep_intermediates: bool = False,
                     eps: float = 1e-6) -> BackboneOutput:
    """patch embed -> [blocks -> grouping] x3 -> blocks -> pooled features.

    `eps` floors the assignment renormalization of every grouping layer so a
    forward pass never aborts on a mass-starved output token; pass eps=0 for
    the strict reference behavior.
    """
    config = params.config
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    x = patch_embed(img, params)

    stage_tokens: list[TokenGrid] = []
    links: list[ChainLink] = []
    intermediates: list[TokenGrid] = []
    for i, st in enumerate(config.stages, start=1):
        for b, bp in enumerate(params.blocks[i - 1]):
            x = encoder_block(x, bp, st.attn_window, st.heads)
            if i == 4 and keep_intermediates:
                intermediates.append(x)
        stage_tokens.append(x)
        if i < 4:
            gp = params.groupings[i - 1]
            h_in, w_in = x.h, x.w
            if not config.group_enabled[i - 1]:
                y = grouping_init(x, gp)
                pair = _parent_onehot_pair(h_in, w_in)
            elif gp.mode == "local" and sparse:
                y, pair = sparse_grouping_forward(x, gp, eps=eps)
            else:
                y, pair = grouping_forward(x, gp, eps=eps)
            links.append(ChainLink(pair, h_in, w_in, h_in // 2, w_in // 2))
            x = y

    final = ops.layer_norm(x.tokens, params.tensors["final.ln_g"],
                           params.tensors["final.ln_b"])
    pooled = ops.mean_rows(final)
    return BackboneOutput(stage_tokens, AssignmentChain(links), pooled, intermediates)


@dataclass
class ClassifierHead:
    w: Tensor
    b: Tensor

    def named_tensors(self):
        yield "head.w", self.w
        yield "head.b", self.b


def init_classifier_head(rng: Rng, d4: int, n_classes: int) -> ClassifierHead:
    return ClassifierHead(parameter(rng.trunc_normal((d4, n_classes), std=0.02), "head.w"),
                          parameter(np.zeros(n_classes), "head.b"))


def classification_logits(pooled: Tensor, head: ClassifierHead) -> Tensor:
    """Single linear layer over mean-pooled final tokens."""
    row = ops.reshape(pooled, (1, pooled.shape[0]))
    return ops.reshape(ops.linear(row, head.w, head.b), (head.b.shape[0],))
