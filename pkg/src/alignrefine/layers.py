"""Shared network building blocks: linear/attention/feed-forward layers on
the autodiff tape, attention bias masks, and sinusoidal positions.

Attention masking uses a large negative additive bias (not -inf) so softmax
stays finite everywhere; exp underflows those entries to exactly zero.
"""

from __future__ import annotations

import math

import numpy as np

from . import numcore as nc
from .numcore import Parameter, Rng, Tensor

MASKED = -1.0e30


def make_param(params: dict, name: str, shape, rng: Rng, kind: str = "weight") -> Parameter:
    """Create and register one Parameter; init is a substream of `rng` keyed
    by name so unrelated parameters never shift each other's draws."""
    if name in params:
        raise ValueError(f"duplicate parameter {name}")
    r = rng.split("init", name)
    if kind == "weight":
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        data = r.normal(shape, scale=1.0 / math.sqrt(fan_in))
    elif kind == "zeros":
        data = np.zeros(shape)
    elif kind == "ones":
        data = np.ones(shape)
    elif kind == "embedding":
        data = r.normal(shape, scale=1.0)
    else:
        raise ValueError(f"unknown init kind {kind}")
    p = Parameter(name, data)
    params[name] = p
    return p


class Linear:
    def __init__(self, params: dict, name: str, d_in: int, d_out: int, rng: Rng):
        self.w = make_param(params, f"{name}.w", (d_in, d_out), rng)
        self.b = make_param(params, f"{name}.b", (d_out,), rng, kind="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return nc.add(nc.matmul(x, self.w), self.b)


class LayerNorm:
    def __init__(self, params: dict, name: str, dim: int, rng: Rng):
        self.gain = make_param(params, f"{name}.gain", (dim,), rng, kind="ones")
        self.bias = make_param(params, f"{name}.bias", (dim,), rng, kind="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention:
    """Scaled dot-product attention; query and key/value sources may differ."""

    def __init__(self, params: dict, name: str, dim: int, heads: int, rng: Rng):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(params, f"{name}.wq", dim, dim, rng)
        self.wk = Linear(params, f"{name}.wk", dim, dim, rng)
        self.wv = Linear(params, f"{name}.wv", dim, dim, rng)
        self.wo = Linear(params, f"{name}.wo", dim, dim, rng)

    def __call__(self, q_in: Tensor, kv_in: Tensor, bias: np.ndarray | None = None) -> Tensor:
        tq = q_in.shape[0]
        tk = kv_in.shape[0]
        h, dh = self.heads, self.head_dim

        def split_heads(x: Tensor, t: int) -> Tensor:
            return nc.permute(nc.reshape(x, (t, h, dh)), (1, 0, 2))  # (H, T, dh)

        q = split_heads(self.wq(q_in), tq)
        k = split_heads(self.wk(kv_in), tk)
        v = split_heads(self.wv(kv_in), tk)
        scores = nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / math.sqrt(dh))  # (H, Tq, Tk)
        if bias is not None:
            scores = nc.add(scores, Tensor(bias))
        attn = nc.softmax_rows(scores)
        mixed = nc.matmul(attn, v)  # (H, Tq, dh)
        merged = nc.reshape(nc.permute(mixed, (1, 0, 2)), (tq, self.dim))
        return self.wo(merged)


class FeedForward:
    def __init__(self, params: dict, name: str, dim: int, hidden: int, rng: Rng):
        self.lin1 = Linear(params, f"{name}.lin1", dim, hidden, rng)
        self.lin2 = Linear(params, f"{name}.lin2", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(nc.gelu(self.lin1(x)))


class TransformerLayer:
    """Pre-norm block: self-attention, optional cross-attention, feed-forward,
    each with a residual connection."""

    def __init__(self, params: dict, name: str, dim: int, heads: int, ffn_mult: int,
                 rng: Rng, cross: bool = False):
        self.ln1 = LayerNorm(params, f"{name}.ln1", dim, rng)
        self.self_attn = MultiHeadAttention(params, f"{name}.selfattn", dim, heads, rng)
        self.cross_attn = None
        if cross:
            self.ln_cross = LayerNorm(params, f"{name}.lncross", dim, rng)
            self.cross_attn = MultiHeadAttention(params, f"{name}.crossattn", dim, heads, rng)
        self.ln2 = LayerNorm(params, f"{name}.ln2", dim, rng)
        self.ffn = FeedForward(params, f"{name}.ffn", dim, dim * ffn_mult, rng)

    def __call__(self, x: Tensor, self_bias: np.ndarray | None = None,
                 memory: Tensor | None = None,
                 dropout_rate: float = 0.0, rng: Rng | None = None,
                 training: bool = False) -> Tensor:
        def drop(t: Tensor) -> Tensor:
            return nc.dropout(t, dropout_rate, rng, training) if dropout_rate else t

        x = nc.add(x, drop(self.self_attn(self.ln1(x), self.ln1(x), self_bias)))
        if self.cross_attn is not None:
            if memory is None:
                raise ValueError("cross-attention layer needs a memory tensor")
            x = nc.add(x, drop(self.cross_attn(self.ln_cross(x), memory)))
        x = nc.add(x, drop(self.ffn(self.ln2(x))))
        return x


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Absolute sine/cosine position features, shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)
    div = np.exp(-idx / dim * math.log(10000.0))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: pe[:, 1::2].shape[1]])
    return pe


def causal_bias(t: int) -> np.ndarray:
    """Additive bias allowing each frame to attend to itself and the past."""
    bias = np.zeros((t, t))
    bias[np.triu_indices(t, k=1)] = MASKED
    return bias


def banded_bias(t: int, right_context: int) -> np.ndarray:
    """Allow keys in [0, q + right_context] for each query frame q."""
    bias = np.zeros((t, t))
    bias[np.triu_indices(t, k=right_context + 1)] = MASKED
    return bias
