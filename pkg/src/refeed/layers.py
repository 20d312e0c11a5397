"""Parameterized building blocks: linear, layer norm, convolution.

Parameters are initialized from per-name RNG streams (see seeding.py),
so two models sharing a parameter name and seed share its initial value
regardless of what else they contain. Projections use scaled uniform
fan-in init; biases and norm offsets start at zero, norm gains at one.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as tc
from .seeding import rng_stream
from .tensor import Tensor


def uniform_fan_in(shape: tuple[int, ...], fan_in: int, seed: int, name: str) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng_stream(seed, "init", name).uniform(-limit, limit, size=shape)


class Module:
    """Tiny base: children discovered by attribute walk, params by name."""

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Tensor) and value.requires_grad:
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_params(path))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{path}.{i}"))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{path}.{i}"] = item
        return out


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, seed: int, name: str, bias: bool = True):
        self.w = Tensor(uniform_fan_in((d_in, d_out), d_in, seed, f"{name}.w"),
                        requires_grad=True, name=f"{name}.w")
        self.b = (Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.b")
                  if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        y = tc.matmul(x, self.w)
        if self.b is not None:
            y = tc.add(y, self.b)
        return y


class LayerNorm(Module):
    def __init__(self, d: int, name: str, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True, name=f"{name}.gain")
        self.bias = Tensor(np.zeros(d), requires_grad=True, name=f"{name}.bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2D(Module):
    """Same-padded stride-1 convolution over (C, H, W) tensors."""

    def __init__(self, c_in: int, c_out: int, kernel: int, seed: int, name: str):
        fan_in = c_in * kernel * kernel
        self.w = Tensor(uniform_fan_in((c_out, c_in, kernel, kernel), fan_in, seed, f"{name}.w"),
                        requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.w, self.b)


class Embedding(Module):
    """Id-to-vector lookup table."""

    def __init__(self, num_rows: int, d: int, seed: int, name: str):
        self.w = Tensor(uniform_fan_in((num_rows, d), d, seed, f"{name}.w"),
                        requires_grad=True, name=f"{name}.w")

    def __call__(self, ids: np.ndarray) -> Tensor:
        return tc.embedding(self.w, ids)


def zero_grads(params: dict[str, Tensor] | Optional[dict] = None, module: Optional[Module] = None):
    if module is not None:
        params = module.named_params()
    for p in params.values():
        p.zero_grad()
