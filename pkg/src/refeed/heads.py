"""Prediction heads and training objectives.

Intermediate taps get a two-layer MLP head (256 hidden units, leaky ReLU,
softmax); the final layer gets a plain linear head. Losses are CTC over
label sequences or per-frame cross-entropy over alignments, and the
training objective is final loss plus lambda times the sum of tap losses.

CTC runs entirely in the log domain. The forward-backward recursion is a
single fused autodiff op whose gradient comes from the alpha/beta state
posteriors, so emission gradients are analytic, not unrolled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tc
from .layers import Linear, Module
from .tensor import InputError, Tensor


class InfeasibleAlignment(ValueError):
    """The label sequence cannot be emitted in the available frames."""


@dataclass
class EmissionMatrix:
    """Per-frame log-posteriors over the output vocabulary.

    Rows log-sum-exp to 0. blank is the CTC no-emission index, or None
    for per-frame (hybrid) emissions.
    """

    log_probs: Tensor
    blank: Optional[int] = 0

    @property
    def num_frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.log_probs.shape[1]


def _log_probs_of(em) -> Tensor:
    return em.log_probs if isinstance(em, EmissionMatrix) else em


class AuxHead(Module):
    """Tap head: d_k -> 256 -> V MLP with leaky ReLU, log-softmax output."""

    HIDDEN = 256

    def __init__(self, d_k: int, vocab_size: int, tap_index: int, seed: int,
                 name: str, leaky_slope: float = 0.01, blank: Optional[int] = 0):
        self.tap_index = tap_index
        self.leaky_slope = leaky_slope
        self.blank = blank
        self.fc1 = Linear(d_k, self.HIDDEN, seed, f"{name}.fc1")
        self.fc2 = Linear(self.HIDDEN, vocab_size, seed, f"{name}.fc2")

    def __call__(self, z: Tensor) -> EmissionMatrix:
        hidden = tc.leaky_relu(self.fc1(z), self.leaky_slope)
        return EmissionMatrix(tc.log_softmax(self.fc2(hidden), axis=-1), self.blank)


class FinalHead(Module):
    """Output head after the last encoder layer: plain linear + log-softmax."""

    def __init__(self, d_k: int, vocab_size: int, seed: int, name: str,
                 blank: Optional[int] = 0):
        self.blank = blank
        self.proj = Linear(d_k, vocab_size, seed, f"{name}.proj")

    def __call__(self, z: Tensor) -> EmissionMatrix:
        return EmissionMatrix(tc.log_softmax(self.proj(z), axis=-1), self.blank)


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

def min_ctc_frames(labels: Sequence[int]) -> int:
    """Frames needed to emit `labels`: one per label plus one per adjacent
    repeat (a blank must separate equal neighbours)."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_loss(em, labels: Sequence[int], blank: Optional[int] = None) -> Tensor:
    """Negative log-probability of `labels` under the emission matrix,
    marginalized over all alignments by log-domain forward-backward.

    The loss is a sum over frames (no length normalization). Infeasible
    label lengths raise InfeasibleAlignment up front.
    """
    lp = _log_probs_of(em)
    if blank is None:
        blank = em.blank if isinstance(em, EmissionMatrix) and em.blank is not None else 0
    labels = np.asarray(list(labels), dtype=np.int64)
    num_frames, vocab = lp.shape
    if labels.size and (labels.min() < 0 or labels.max() >= vocab):
        raise InputError(f"label id out of range for vocab of {vocab}")
    if np.any(labels == blank):
        raise InputError(f"labels must not contain the blank index {blank}")
    needed = min_ctc_frames(labels)
    if num_frames < needed:
        raise InfeasibleAlignment(
            f"{labels.size} labels with repeats need {needed} frames, "
            f"got {num_frames}")

    aug = np.full(2 * labels.size + 1, blank, dtype=np.int64)
    aug[1::2] = labels
    num_states = aug.size
    # states that may be skipped into: non-blank and distinct from the
    # state two back
    can_skip = np.zeros(num_states, dtype=bool)
    if num_states > 2:
        can_skip[2:] = (aug[2:] != blank) & (aug[2:] != aug[:-2])

    logp = lp.data
    neg_inf = -np.inf
    alpha = np.full((num_frames, num_states), neg_inf)
    alpha[0, 0] = logp[0, aug[0]]
    if num_states > 1:
        alpha[0, 1] = logp[0, aug[1]]
    for t in range(1, num_frames):
        stay = alpha[t - 1]
        step = np.full(num_states, neg_inf)
        step[1:] = alpha[t - 1, :-1]
        skip = np.full(num_states, neg_inf)
        skip[2:] = np.where(can_skip[2:], alpha[t - 1, :-2], neg_inf)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + logp[t, aug]

    if num_states > 1:
        total = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        total = alpha[-1, -1]
    loss_value = -total

    def backward(g):
        if not lp.requires_grad:
            return
        beta = np.full((num_frames, num_states), neg_inf)
        beta[-1, -1] = logp[-1, aug[-1]]
        if num_states > 1:
            beta[-1, -2] = logp[-1, aug[-2]]
        for t in range(num_frames - 2, -1, -1):
            stay = beta[t + 1]
            step = np.full(num_states, neg_inf)
            step[:-1] = beta[t + 1, 1:]
            skip = np.full(num_states, neg_inf)
            skip[:-2] = np.where(can_skip[2:], beta[t + 1, 2:], neg_inf)
            beta[t] = np.logaddexp(np.logaddexp(stay, step), skip) + logp[t, aug]

        # log state posterior; alpha and beta both include the frame-t
        # emission, so it is divided out once
        gamma = alpha + beta - logp[:, aug] - total
        grad = np.zeros_like(logp)
        post = np.exp(gamma)
        for s in range(num_states):
            grad[:, aug[s]] -= post[:, s]
        lp.accumulate_grad(float(g) * grad)

    return tc.make_node(np.float64(loss_value), (lp,), backward)


def ce_frame_loss(em, alignment: Sequence[int]) -> Tensor:
    """Mean per-frame negative log-likelihood of the aligned targets."""
    lp = _log_probs_of(em)
    alignment = np.asarray(list(alignment), dtype=np.int64)
    if alignment.shape[0] != lp.shape[0]:
        raise InputError(f"alignment of {alignment.shape[0]} frames does not "
                         f"match {lp.shape[0]} emission frames")
    return tc.neg(tc.gather_index(lp, alignment).mean())


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    """Per-step loss decomposition plus gradient diagnostics."""

    total: float
    final: float
    aux: dict[int, float] = field(default_factory=dict)
    grad_norm: Optional[float] = None
    step: Optional[int] = None

    @staticmethod
    def csv_header(taps: Sequence[int]) -> str:
        cols = ["step", "total", "final"] + [f"aux_{k}" for k in taps] + ["grad_norm"]
        return ",".join(cols)

    def csv_row(self, taps: Sequence[int]) -> str:
        cols = [str(self.step if self.step is not None else ""),
                repr(self.total), repr(self.final)]
        cols += [repr(self.aux[k]) for k in taps]
        cols.append(repr(self.grad_norm) if self.grad_norm is not None else "")
        return ",".join(cols)


def total_objective(final_loss: Tensor, aux_losses: Sequence[tuple[int, Tensor]],
                    lam: float) -> tuple[Tensor, LossReport]:
    """final + lambda * sum(aux); returns the graph node and the report.

    With no taps the final loss tensor is returned unchanged, so a
    tap-free build is bit-identical to a plain run.
    """
    if lam < 0:
        raise InputError(f"aux loss weight must be non-negative, got {lam}")
    report = LossReport(total=0.0, final=final_loss.item(),
                        aux={k: loss.item() for k, loss in aux_losses})
    total = final_loss
    if aux_losses:
        aux_sum = aux_losses[0][1]
        for _, loss in aux_losses[1:]:
            aux_sum = tc.add(aux_sum, loss)
        total = tc.add(final_loss, tc.mul(aux_sum, lam))
    report.total = total.item()
    return total, report
