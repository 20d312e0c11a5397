"""Dense float64 tensors with reverse-mode automatic differentiation.

Every trainable value in the package is a Tensor. Each op records the
closure that maps the output gradient back onto its parents; backward()
walks the recorded graph once, in reverse topological order. Graphs are
per-forward-pass; nothing is retained after backward() finishes unless
the caller keeps references.

All stochastic ops take an explicit numpy Generator. There is no global
randomness anywhere in this module.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested op."""


class InputError(ValueError):
    """An argument violates the operation's contract."""


class Tensor:
    """N-dimensional float64 value with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate .grad on every requires_grad tensor reachable from here.

        The root must be scalar; the seed gradient is 1.0.
        """
        if self.data.size != 1:
            raise InputError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        graph = ComputeGraph.from_root(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(graph.nodes):
            if node._backward is not None:
                node._backward(node.grad)

    # arithmetic sugar; everything routes through the op functions below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        return narrow(self, axis, start, length)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{nm})"


class ComputeGraph:
    """Topologically ordered record of the ops reachable from a root tensor.

    nodes[i]'s parents all appear before it; reversed(nodes) is a valid
    backward order that visits each node exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor],
              backward: Callable[[np.ndarray], None]) -> Tensor:
    """Create an op output; records the graph only if a parent needs grad.

    `backward` receives the output gradient and must call accumulate_grad
    on each parent that requires it. Exposed so other modules can define
    fused ops (convolution, CTC) with analytic gradients.
    """
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return make_node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return make_node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return make_node(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return make_node(-a.data, (a,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return make_node(np.where(mask, x.data, 0.0), (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data > 0.0
    grad_factor = np.where(mask, 1.0, slope)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * grad_factor)

    return make_node(np.where(mask, x.data, slope * x.data), (x,), backward)


def dropout(x: Tensor, rate: float, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: surviving activations are scaled by 1/keep at train
    time so inference needs no rescaling. rate 0 or train=False is identity.
    """
    if not 0.0 <= rate < 1.0:
        raise InputError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise InputError("dropout in train mode needs an explicit rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate) / keep

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return make_node(x.data * mask, (x,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul needs (m,k) x (k,n), got {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return make_node(data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeMismatch(f"transpose needs a 2-D tensor, got {x.shape}")

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.T)

    return make_node(x.data.T.copy(), (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.shape

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(orig))

    return make_node(x.data.reshape(shape), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise InputError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return make_node(data, tensors, backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not 0 <= start and start + length <= x.shape[axis]:
        raise ShapeMismatch(
            f"narrow [{start}:{start + length}) out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[idx] = g
            x.accumulate_grad(buf)

    return make_node(x.data[idx].copy(), (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, x.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x.accumulate_grad(np.broadcast_to(ge, x.shape))

    return make_node(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# normalization and probability ops
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rows sum to 1."""
    if not np.isfinite(x.data).all():
        raise InputError("softmax input must be finite")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            x.accumulate_grad(y * (g - dot))

    return make_node(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.isfinite(x.data).all():
        raise InputError("log_softmax input must be finite")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return make_node(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    gain and bias are 1-D with the length of the normalized axis.
    """
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeMismatch(f"layer_norm needs a non-empty last axis, got {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=lead))
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=lead))
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad((gh - m1 - xhat * m2) * inv_std)

    return make_node(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# lookup ops
# ---------------------------------------------------------------------------

def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup weight[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeMismatch(f"embedding ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise InputError(f"embedding id out of range for table of {weight.shape[0]} rows")

    def backward(g):
        if weight.requires_grad:
            buf = np.zeros_like(weight.data)
            np.add.at(buf, ids, g)
            weight.accumulate_grad(buf)

    return make_node(weight.data[ids].copy(), (weight,), backward)


def gather_index(x: Tensor, ids: np.ndarray) -> Tensor:
    """Per-row column pick: out[i] = x[i, ids[i]] for a 2-D x."""
    ids = np.asarray(ids, dtype=np.int64)
    if x.ndim != 2 or ids.ndim != 1 or ids.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"gather_index needs (n,m) x and (n,) ids, got {x.shape}, {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[1]):
        raise InputError(f"gather_index id out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[rows, ids] = g
            x.accumulate_grad(buf)

    return make_node(x.data[rows, ids].copy(), (x,), backward)


# ---------------------------------------------------------------------------
# 2-D convolution ops (channels-first single image)
# ---------------------------------------------------------------------------

def _im2col(padded: np.ndarray, kh: int, kw: int, oh: int, ow: int) -> np.ndarray:
    # (C, oh, ow, kh, kw) view, then (oh*ow, C*kh*kw) copy
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    return win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, -1)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3x3-style same-padded stride-1 convolution on a (C, H, W) tensor.

    weight is (O, C, kh, kw) with odd kernel dims; output is (O, H, W).
    Fused op: forward via im2col, analytic backward via col2im.
    """
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"conv2d needs (C,H,W) x and (O,C,kh,kw) weight, "
                            f"got {x.shape} and {weight.shape}")
    c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise InputError("conv2d supports odd kernel sizes only")
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(padded, kh, kw, h, w)          # (h*w, c*kh*kw)
    wmat = weight.data.reshape(o, -1)             # (o, c*kh*kw)
    out = cols @ wmat.T                           # (h*w, o)
    if bias is not None:
        out = out + bias.data
    out = out.T.reshape(o, h, w)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(o, h * w).T                # (h*w, o)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=0))
        if weight.requires_grad:
            weight.accumulate_grad((g2.T @ cols).reshape(weight.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(h, w, c, kh, kw)
            dpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    dpad[:, i:i + h, j:j + w] += dcols[:, :, :, i, j].transpose(2, 0, 1)
            x.accumulate_grad(dpad[:, ph:h + ph, pw:w + pw])

    return make_node(out, parents, backward)


def maxpool2d(x: Tensor, kh: int, kw: int) -> Tensor:
    """Non-overlapping max pooling on (C, H, W); trailing remainder rows or
    columns that do not fill a window are dropped (floor semantics).
    """
    if x.ndim != 3:
        raise ShapeMismatch(f"maxpool2d needs (C,H,W), got {x.shape}")
    if kh == 1 and kw == 1:
        return x
    c, h, w = x.shape
    oh, ow = h // kh, w // kw
    if oh == 0 or ow == 0:
        raise InputError(f"maxpool2d window ({kh},{kw}) larger than input {x.shape}")
    blocks = (x.data[:, :oh * kh, :ow * kw]
              .reshape(c, oh, kh, ow, kw)
              .transpose(0, 1, 3, 2, 4)
              .reshape(c, oh, ow, kh * kw))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        dblocks = np.zeros_like(blocks)
        np.put_along_axis(dblocks, arg[..., None], g[..., None], axis=-1)
        buf = np.zeros_like(x.data)
        buf[:, :oh * kh, :ow * kw] = (dblocks
                                      .reshape(c, oh, ow, kh, kw)
                                      .transpose(0, 1, 3, 2, 4)
                                      .reshape(c, oh * kh, ow * kw))
        x.accumulate_grad(buf)

    return make_node(out, (x,), backward)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    """L2 norm over all populated parameter gradients."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)
