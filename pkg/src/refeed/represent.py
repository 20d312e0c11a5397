"""Mid-network feature re-presentation.

Fuses the projected input-feature stream with projected intermediate
activations: both are layer-normed, tagged with a positional encoding on
the feature axis, stacked along the time axis into a 2S-row sequence, and
attended over by a dedicated transformer layer. The query stream (split A
uses the feature view, split B the activation view) keeps the output at
the original S rows; a final projection + ReLU + layer norm returns the
result to the encoder width so the stack continues unchanged.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as tc
from .layers import LayerNorm, Linear, Module
from .tensor import ShapeMismatch, Tensor
from .transformer import (AttentionConfig, ConfigError, TransformerLayer,
                          positional_encoding)

SPLITS = ("A", "B")


def project_and_tag(z: Tensor, proj: Linear, norm: LayerNorm,
                    encoding: np.ndarray) -> Tensor:
    """layer_norm(z @ W) concatenated with the positional rows for z."""
    if encoding.shape[0] != z.shape[0]:
        raise ShapeMismatch(f"positional table of {encoding.shape[0]} rows "
                            f"does not cover {z.shape[0]} positions")
    return tc.concat([norm(proj(z)), Tensor(encoding)], axis=1)


def time_concat(z0p: Tensor, zkp: Tensor) -> Tensor:
    """Stack the two tagged streams along time: rows [0,S) are the feature
    view, rows [S,2S) the activation view."""
    if z0p.shape != zkp.shape:
        raise ShapeMismatch(f"time_concat needs equal shapes, "
                            f"got {z0p.shape} and {zkp.shape}")
    return tc.concat([z0p, zkp], axis=0)


class RepresentLayer(Module):
    """Projection pair, fusion transformer over width d_c + d_e, and the
    output head that restores the encoder width."""

    def __init__(self, d_in0: int, d_k: int, d_c: int, d_e: int,
                 num_heads: int, d_ff: int, dropout: float, split: str,
                 seed: int, name: str):
        if split not in SPLITS:
            raise ConfigError(f"split must be 'A' or 'B', got {split!r}")
        self.split = split
        self.d_e = d_e
        self.proj0 = Linear(d_in0, d_c, seed, f"{name}.proj0")
        self.projk = Linear(d_k, d_c, seed, f"{name}.projk")
        self.norm0 = LayerNorm(d_c, f"{name}.norm0")
        self.normk = LayerNorm(d_c, f"{name}.normk")
        self.fusion = TransformerLayer(AttentionConfig(d_c + d_e, num_heads),
                                       d_ff, dropout, seed, f"{name}.fusion")
        self.out_proj = Linear(d_c + d_e, d_k, seed, f"{name}.out_proj")
        self.out_norm = LayerNorm(d_k, f"{name}.out_norm")

    def __call__(self, z0: Tensor, zk: Tensor, train: bool = False,
                 rng: Optional[np.random.Generator] = None,
                 weights_out: Optional[list] = None) -> Tensor:
        if z0.shape[0] != zk.shape[0]:
            raise ShapeMismatch(f"feature stream has {z0.shape[0]} rows but "
                                f"activations have {zk.shape[0]}")
        # both halves describe the same time indices, so they share rows
        # 0..S-1 of the encoding table
        enc = positional_encoding(z0.shape[0], self.d_e)
        z0p = project_and_tag(z0, self.proj0, self.norm0, enc)
        zkp = project_and_tag(zk, self.projk, self.normk, enc)
        merged = time_concat(z0p, zkp)
        query = z0p if self.split == "A" else zkp
        fused = self.fusion(query, kv=merged, train=train, rng=rng,
                            weights_out=weights_out)
        return self.out_norm(tc.relu(self.out_proj(fused)))
