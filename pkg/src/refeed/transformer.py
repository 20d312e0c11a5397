"""Encoder-side transformer machinery.

Attention follows the scaled dot-product form: weights are the row-wise
softmax of Q K^T / sqrt(d), applied to V. Multi-head projection packs the
per-head matrices into single d x d parameters whose column blocks are
the individual heads. Blocks are post-norm: residual add, then layer
norm, for both the attention and feed-forward sublayers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tc
from .layers import LayerNorm, Linear, Module
from .tensor import InputError, ShapeMismatch, Tensor


class ConfigError(ValueError):
    """Inconsistent architecture settings."""


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 512
    num_heads: int = 8

    def __post_init__(self):
        if self.d_model <= 0 or self.num_heads <= 0:
            raise ConfigError(f"d_model and num_heads must be positive, "
                              f"got {self.d_model}, {self.num_heads}")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(f"num_heads {self.num_heads} must divide "
                              f"d_model {self.d_model}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal table: E[p, 2i] = sin(p / 10000^(2i/dim)), odd cols cos."""
    if dim % 2 != 0:
        raise ConfigError(f"positional encoding dimension must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates)
    return table


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         dropout_rate: float = 0.0, train: bool = False,
                         rng: Optional[np.random.Generator] = None,
                         weights_out: Optional[list] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V for 2-D (seq, dim) inputs.

    weights_out, when given, receives a detached copy of the attention
    weight matrix (rows sum to 1).
    """
    if q.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"query width {q.shape} does not match key width {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"key length {k.shape} does not match value length {v.shape}")
    logits = tc.mul(tc.matmul(q, tc.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    weights = tc.softmax(logits, axis=-1)
    if weights_out is not None:
        weights_out.append(weights.data.copy())
    weights = tc.dropout(weights, dropout_rate, train, rng)
    return tc.matmul(weights, v)


class MultiHeadAttention(Module):
    """P parallel attention heads over learned projections, re-projected.

    The packed wq/wk/wv matrices are d_model x d_model; columns
    [p*d_head, (p+1)*d_head) hold head p's projection.
    """

    def __init__(self, cfg: AttentionConfig, seed: int, name: str):
        self.cfg = cfg
        d = cfg.d_model
        self.wq = Linear(d, d, seed, f"{name}.wq")
        self.wk = Linear(d, d, seed, f"{name}.wk")
        self.wv = Linear(d, d, seed, f"{name}.wv")
        self.wo = Linear(d, d, seed, f"{name}.wo")

    def __call__(self, q: Tensor, k: Tensor, v: Tensor,
                 dropout_rate: float = 0.0, train: bool = False,
                 rng: Optional[np.random.Generator] = None,
                 weights_out: Optional[list] = None) -> Tensor:
        cfg = self.cfg
        qp, kp, vp = self.wq(q), self.wk(k), self.wv(v)
        heads = []
        for p in range(cfg.num_heads):
            lo = p * cfg.d_head
            heads.append(scaled_dot_attention(
                qp.narrow(1, lo, cfg.d_head),
                kp.narrow(1, lo, cfg.d_head),
                vp.narrow(1, lo, cfg.d_head),
                dropout_rate=dropout_rate, train=train, rng=rng,
                weights_out=weights_out))
        return self.wo(tc.concat(heads, axis=1))


class TransformerLayer(Module):
    """Post-norm encoder block: self/cross attention then feed-forward.

    Dropout is applied to the attention weights and to the feed-forward
    hidden activations. The residual path follows the query stream, so
    the output length always equals the query length.
    """

    def __init__(self, cfg: AttentionConfig, d_ff: int, dropout: float,
                 seed: int, name: str):
        self.attn = MultiHeadAttention(cfg, seed, f"{name}.attn")
        self.ff1 = Linear(cfg.d_model, d_ff, seed, f"{name}.ff1")
        self.ff2 = Linear(d_ff, cfg.d_model, seed, f"{name}.ff2")
        self.norm1 = LayerNorm(cfg.d_model, f"{name}.norm1")
        self.norm2 = LayerNorm(cfg.d_model, f"{name}.norm2")
        self.dropout = dropout

    def __call__(self, x: Tensor, kv: Optional[Tensor] = None,
                 train: bool = False, rng: Optional[np.random.Generator] = None,
                 weights_out: Optional[list] = None) -> Tensor:
        source = x if kv is None else kv
        attended = self.attn(x, source, source, dropout_rate=self.dropout,
                             train=train, rng=rng, weights_out=weights_out)
        h = self.norm1(tc.add(x, attended))
        hidden = tc.dropout(tc.relu(self.ff1(h)), self.dropout, train, rng)
        return self.norm2(tc.add(h, self.ff2(hidden)))


def transformer_block(layer: TransformerLayer, x: Tensor, train: bool = False,
                      rng: Optional[np.random.Generator] = None,
                      weights_out: Optional[list] = None) -> Tensor:
    """Self-attention form of the block: Q = K = V = x."""
    return layer(x, train=train, rng=rng, weights_out=weights_out)
