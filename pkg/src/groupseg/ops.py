"""Differentiable primitives over :class:`~groupseg.tensor.Tensor`.

Each primitive computes its forward value with numpy, then registers an
explicit vector-Jacobian callback via :func:`~groupseg.tensor.record`.
All primitives are pure functions of their inputs.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import DegenerateColumnError, ShapeError
from .tensor import Tensor, as_tensor, record

# Large negative constant standing in for -inf in masked logits; exp() of
# (this - rowmax) underflows to exactly 0.0, so masked softmax entries are
# exact zeros while the tensor itself stays finite.
NEG_MASK = -1.0e30

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record(out, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record(out, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return record(out, (a, b), vjp, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * c
    return record(out, (x,), lambda g: (g * c,), "scale")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,), "exp")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return record(out, (a, b), vjp, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: (B,N,K) x (B,K,M) -> (B,N,M)."""
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm shapes disagree: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return record(out, (a, b), vjp, "bmm")


def transpose(x: Tensor) -> Tensor:
    return record(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def transpose_axes(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return record(out, (x,), lambda g: (g.transpose(inv),), "transpose_axes")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    orig = x.data.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat_cols leading dims disagree: {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)

    def vjp(g):
        return g[..., :na], g[..., na:]

    return record(out, (a, b), vjp, "concat_cols")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[...] = x[idx[...]] along axis 0; backward scatter-adds."""
    idx = np.asarray(idx)
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return record(out, (x,), vjp, "gather_rows")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())
    return record(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),), "sum_all")


def mean_rows(x: Tensor) -> Tensor:
    """(N, d) -> (d,) mean over rows (global token pooling)."""
    n = x.data.shape[0]
    out = x.data.mean(axis=0)

    def vjp(g):
        return (np.broadcast_to(g / n, x.data.shape).copy(),)

    return record(out, (x,), vjp, "mean_rows")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b for x:(N,d_in), w:(d_in,d_out), b:(d_out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear shapes disagree: x{x.data.shape} w{w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear bias shape {b.data.shape} != ({w.data.shape[1]},)")
    out = x.data @ w.data + b.data

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return record(out, (x, w, b), vjp, "linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    if eps <= 0:
        raise ShapeError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def vjp(g):
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), vjp, "layer_norm")


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax over the last axis with max-subtraction for stability."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return record(s, (x,), vjp, "softmax_rows")


def gelu(x: Tensor) -> Tensor:
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return record(out, (x,), vjp, "gelu")


def l2_normalize_rows(x: Tensor, floor: float = 1e-12) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    n = np.maximum(n, floor)
    y = x.data / n

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * dot) / n,)

    return record(y, (x,), vjp, "l2_normalize_rows")


def column_renorm(a: Tensor, eps: float = 0.0, support_counts=None,
                  min_mass: float = 1e-12) -> Tensor:
    """Divide each column by its sum: a_down[i,j] = a[i,j] / sum_k a[k,j].

    With eps=0 a (near-)zero column is an error.  With eps>0 the denominator
    gains an eps floor accumulated once per supporting entry (`support_counts`
    per column, all rows by default), so degenerate columns become well-defined
    near-zero columns instead.
    """
    s = a.data.sum(axis=0)
    if eps > 0:
        counts = np.full(a.data.shape[1], a.data.shape[0]) \
            if support_counts is None else np.asarray(support_counts)
        s = s + counts * eps
    elif s.min() < min_mass:
        j = int(s.argmin())
        raise DegenerateColumnError(
            f"assignment column {j} has total mass {s.min():.3e} < {min_mass:.0e}")
    d = a.data / s

    def vjp(g):
        c = (g * d).sum(axis=0)
        return ((g - c) / s,)

    return record(d, (a,), vjp, "column_renorm")


def strided_conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int, pad: int) -> Tensor:
    """Cross-correlation of x:(H,W,C_in) with kernel:(kh,kw,C_in,C_out).

    H_out = floor((H + 2*pad - kh)/stride) + 1, same for width.
    """
    h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"conv channel mismatch: input {cin}, kernel {kcin}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv output dims non-positive: ({ho},{wo})")
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]                     # (ho, wo, cin, kh, kw)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat + bias.data).reshape(ho, wo, cout)

    def vjp(g):
        gf = g.reshape(ho * wo, cout)
        gk = (cols.T @ gf).reshape(kh, kw, cin, cout)
        gb = gf.sum(axis=0)
        gcols = (gf @ kmat.T).reshape(ho, wo, kh, kw, cin)
        gxp = np.zeros((h + 2 * pad, w + 2 * pad, cin), dtype=x.dtype)
        for a in range(kh):
            for b in range(kw):
                gxp[a:a + ho * stride:stride, b:b + wo * stride:stride] += gcols[:, :, a, b]
        gx = gxp[pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk, gb

    return record(out, (x, kernel, bias), vjp, "strided_conv2d")


_BILERP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _bilerp_matrix(n_in: int, factor: int) -> np.ndarray:
    """(factor*n_in, n_in) 1-D bilinear interpolation (half-pixel centers)."""
    key = (n_in, factor)
    m = _BILERP_CACHE.get(key)
    if m is None:
        n_out = n_in * factor
        m = np.zeros((n_out, n_in))
        src = (np.arange(n_out) + 0.5) / factor - 0.5
        i0 = np.clip(np.floor(src).astype(int), 0, n_in - 1)
        i1 = np.clip(i0 + 1, 0, n_in - 1)
        t = np.clip(src - np.floor(src), 0.0, 1.0)
        t[src < 0] = 0.0
        np.add.at(m, (np.arange(n_out), i0), 1.0 - t)
        np.add.at(m, (np.arange(n_out), i1), t)
        _BILERP_CACHE[key] = m
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of an (H, W, C) grid by an integer factor."""
    h, w, _ = x.data.shape
    ky = _bilerp_matrix(h, factor)
    kx = _bilerp_matrix(w, factor)
    t = np.tensordot(ky, x.data, (1, 0))              # (fH, W, C)
    out = np.tensordot(kx, t, (1, 1)).transpose(1, 0, 2)  # (fH, fW, C)

    def vjp(g):
        gt = np.tensordot(kx.T, g, (1, 1)).transpose(1, 0, 2)  # (fH, W, C)
        return (np.tensordot(ky.T, gt, (1, 0)),)

    return record(out, (x,), vjp, "upsample_bilinear")


def mlp_2layer(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """linear -> GELU -> linear; the MLP shape used throughout the model."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)
