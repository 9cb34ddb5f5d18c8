"""Transformer and convolution building blocks on top of :mod:`mqt.tensor`.

Parameters live in small dataclasses of leaf tensors; the blocks themselves
are plain functions so they can be shared across queries, scales and tasks
simply by passing the same parameter object.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache
import math

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    add_bias,
    gelu,
    matmul,
    parameter,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

PE_HALF_WIDTH = 0.02


class _Params:
    """Mixin: enumerate tensor fields by name."""

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                out[prefix + f.name] = value
        return out


@dataclass
class LayerNormParams(_Params):
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5


@dataclass
class MhsaParams(_Params):
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    num_heads: int
    # "head": 1/sqrt(C / heads); "channels": 1/sqrt(C)
    scale_dim: str = "head"

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads


@dataclass
class MlpParams(_Params):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ConvParams(_Params):
    kernel: Tensor  # k x k x C_in x C_out
    bias: Tensor
    stride: int = 1
    padding: int = 0


def _uniform(rng: np.random.Generator, shape, half_width: float, dtype) -> Tensor:
    return parameter(rng.uniform(-half_width, half_width, size=shape), dtype=dtype)


def init_layer_norm(channels: int, dtype=None, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(
        parameter(np.ones(channels), dtype=dtype), parameter(np.zeros(channels), dtype=dtype), eps
    )


def init_mhsa(rng: np.random.Generator, channels: int, num_heads: int, dtype=None, scale_dim: str = "head") -> MhsaParams:
    if num_heads < 1 or channels % num_heads:
        raise ContractError(f"num_heads={num_heads} must divide channels={channels}")
    bound = 1.0 / math.sqrt(channels)
    w = [_uniform(rng, (channels, channels), bound, dtype) for _ in range(4)]
    return MhsaParams(*w, num_heads=num_heads, scale_dim=scale_dim)


def init_mlp(rng: np.random.Generator, channels: int, ratio: int = 4, dtype=None) -> MlpParams:
    hidden = ratio * channels
    return MlpParams(
        _uniform(rng, (channels, hidden), 1.0 / math.sqrt(channels), dtype),
        _uniform(rng, (hidden,), 1.0 / math.sqrt(channels), dtype),
        _uniform(rng, (hidden, channels), 1.0 / math.sqrt(hidden), dtype),
        _uniform(rng, (channels,), 1.0 / math.sqrt(hidden), dtype),
    )


def init_conv(rng, k: int, c_in: int, c_out: int, stride: int = 1, padding: int | None = None, dtype=None) -> ConvParams:
    if padding is None:
        padding = k // 2
    bound = 1.0 / math.sqrt(k * k * c_in)
    return ConvParams(
        _uniform(rng, (k, k, c_in, c_out), bound, dtype),
        _uniform(rng, (c_out,), bound, dtype),
        stride,
        padding,
    )


def init_positional(rng: np.random.Generator, rows: int, channels: int, dtype=None) -> Tensor:
    return _uniform(rng, (rows, channels), PE_HALF_WIDTH, dtype)


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Normalize over the last axis (population variance), then gamma * x_hat + beta."""
    c = x.shape[-1]
    if p.gamma.shape != (c,) or p.beta.shape != (c,):
        raise DimensionError(f"layer_norm: params for C={p.gamma.shape[0]} applied to {x.shape}")
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    centered = data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + p.eps)
    xhat = centered * inv_std
    gamma, beta = p.gamma, p.beta
    axes = tuple(range(data.ndim - 1))

    def _bw(g):
        gx = g * gamma.data
        dx = inv_std * (
            gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor.from_op(xhat * gamma.data + beta.data, (x, gamma, beta), _bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add_bias(out, b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    rows, c = x.shape
    return transpose(reshape(x, (rows, heads, c // heads)), (1, 0, 2))


def mhsa(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: MhsaParams, return_attention: bool = False):
    """Multi-head attention of ``q_in`` rows over ``k_in``/``v_in`` rows.

    Returns the L_q x C output, plus the heads x L_q x L_k attention weights
    when ``return_attention`` is set.
    """
    c = p.channels
    for label, t in (("q", q_in), ("k", k_in), ("v", v_in)):
        if t.data.ndim != 2 or t.shape[1] != c:
            raise ContractError(f"mhsa: {label} input {t.shape} does not have C={c} channels")
    if k_in.shape[0] < 1 or k_in.shape[0] != v_in.shape[0]:
        raise ContractError(f"mhsa: need L_k >= 1 keys matching values, got {k_in.shape}, {v_in.shape}")
    h = p.num_heads
    d_scale = p.head_dim if p.scale_dim == "head" else c
    q = _split_heads(matmul(q_in, p.wq), h)
    k = _split_heads(matmul(k_in, p.wk), h)
    v = _split_heads(matmul(v_in, p.wv), h)
    attn = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d_scale)))
    mixed = transpose(matmul(attn, v), (1, 0, 2))
    out = matmul(reshape(mixed, (q_in.shape[0], c)), p.wo)
    return (out, attn) if return_attention else out


def mlp_block(x: Tensor, p: MlpParams) -> Tensor:
    if x.shape[-1] != p.w1.shape[0]:
        raise DimensionError(f"mlp_block: input {x.shape} vs W1 {p.w1.shape}")
    return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2)


def residual(x: Tensor, branch: Tensor) -> Tensor:
    return add(x, branch)


@lru_cache(maxsize=256)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the 1-D align-corners-false, edge-clamped weights of output i."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.setflags(write=False)
    return m


def bilinear_resample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize an H x W x C map with separable bilinear interpolation."""
    if out_h < 1 or out_w < 1:
        raise ContractError(f"bilinear_resample: target size {out_h}x{out_w} must be positive")
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_resample expects H x W x C, got {x.shape}")
    h, w, c = x.shape
    if (h, w) == (out_h, out_w):
        return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,))
    ry = bilinear_matrix(h, out_h).astype(x.dtype)
    rx = bilinear_matrix(w, out_w).astype(x.dtype)
    rows = (ry @ x.data.reshape(h, w * c)).reshape(out_h, w, c)
    out = np.matmul(rx, rows)

    def _bw(g):
        g_rows = np.matmul(rx.T, g)
        return ((ry.T @ g_rows.reshape(out_h, w * c)).reshape(h, w, c),)

    return Tensor.from_op(out, (x,), _bw)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation of an H x W x C_in map with a k x k x C_in x C_out kernel."""
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d expects H x W x C_in, got {x.shape}")
    k, k2, c_in, c_out = p.kernel.shape
    h, w, cx = x.shape
    s, pad = p.stride, p.padding
    if k != k2 or cx != c_in or p.bias.shape != (c_out,):
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {p.kernel.shape}")
    h_out = (h + 2 * pad - k) // s + 1
    w_out = (w + 2 * pad - k) // s + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"conv2d: kernel {k} with padding {pad} does not fit input {x.shape}")
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    span_h = s * (h_out - 1) + 1
    span_w = s * (w_out - 1) + 1
    cols = np.empty((h_out, w_out, k, k, c_in), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj, :] = xp[di : di + span_h : s, dj : dj + span_w : s, :]
    cols2 = cols.reshape(h_out * w_out, k * k * c_in)
    kmat = p.kernel.data.reshape(k * k * c_in, c_out)
    out = (cols2 @ kmat + p.bias.data).reshape(h_out, w_out, c_out)
    kernel, bias = p.kernel, p.bias

    def _bw(g):
        g2 = g.reshape(h_out * w_out, c_out)
        g_kernel = (cols2.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        g_bias = g2.sum(axis=0) if bias.requires_grad else None
        g_x = None
        if x.requires_grad:
            g_cols = (g2 @ kmat.T).reshape(h_out, w_out, k, k, c_in)
            g_xp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    g_xp[di : di + span_h : s, dj : dj + span_w : s, :] += g_cols[:, :, di, dj, :]
            g_x = g_xp[pad : pad + h, pad : pad + w, :] if pad else g_xp
        return g_x, g_kernel, g_bias

    return Tensor.from_op(out, (x, kernel, bias), _bw)
