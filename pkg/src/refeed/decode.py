"""Emission-matrix decoding and sequence scoring.

Greedy decoding collapses the per-frame argmax path (repeats merged,
blanks dropped). Prefix beam search keeps per-prefix blank/non-blank
probabilities in the log domain and, given a wide enough beam, ranks
label sequences by their exact posterior. Scoring is plain Levenshtein.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import InputError


@dataclass
class Hypothesis:
    labels: tuple[int, ...]
    score: float
    times: Optional[tuple[int, ...]] = None


def _as_array(em) -> np.ndarray:
    log_probs = getattr(em, "log_probs", em)
    data = getattr(log_probs, "data", log_probs)
    return np.asarray(data, dtype=np.float64)


def greedy_decode(em, blank: Optional[int] = 0) -> Hypothesis:
    """Per-frame argmax, collapse repeated symbols, drop blanks.

    Argmax ties break toward the lowest symbol index. blank=None collapses
    repeats only (per-frame state decoding). times holds the frame where
    each surviving label's run starts.
    """
    lp = _as_array(em)
    path = lp.argmax(axis=1)
    score = float(lp.max(axis=1).sum())
    labels: list[int] = []
    times: list[int] = []
    prev = None
    for t, sym in enumerate(path):
        sym = int(sym)
        if sym != prev:
            if blank is None or sym != blank:
                labels.append(sym)
                times.append(t)
        prev = sym
    return Hypothesis(tuple(labels), score, tuple(times))


def prefix_beam_decode(em, beam: int, blank: int = 0,
                       score_hook: Optional[Callable[[tuple[int, ...], int], float]] = None
                       ) -> list[Hypothesis]:
    """CTC prefix beam search; returns hypotheses ranked by log posterior.

    score_hook, when given, is added to a prefix's score each time it is
    extended by a new label (extension point for shallow LM fusion).
    """
    if beam < 1:
        raise InputError(f"beam width must be >= 1, got {beam}")
    lp = _as_array(em)
    num_frames, vocab = lp.shape
    neg_inf = -np.inf
    # prefix -> [log p(ending in blank), log p(ending in its last label)]
    beams: dict[tuple[int, ...], list[float]] = {(): [0.0, neg_inf]}
    for t in range(num_frames):
        grown: dict[tuple[int, ...], list[float]] = {}

        def bump(prefix, which, value):
            slot = grown.setdefault(prefix, [neg_inf, neg_inf])
            slot[which] = np.logaddexp(slot[which], value)

        for prefix, (p_b, p_nb) in beams.items():
            p_tot = np.logaddexp(p_b, p_nb)
            bump(prefix, 0, p_tot + lp[t, blank])
            if prefix:
                bump(prefix, 1, p_nb + lp[t, prefix[-1]])
            for sym in range(vocab):
                if sym == blank:
                    continue
                base = p_b if (prefix and sym == prefix[-1]) else p_tot
                if base == neg_inf:
                    continue
                ext = base + lp[t, sym]
                if score_hook is not None:
                    ext += score_hook(prefix, sym)
                bump(prefix + (sym,), 1, ext)
        ranked = sorted(grown.items(),
                        key=lambda kv: -np.logaddexp(kv[1][0], kv[1][1]))
        beams = dict(ranked[:beam])
    hyps = [Hypothesis(prefix, float(np.logaddexp(p_b, p_nb)))
            for prefix, (p_b, p_nb) in beams.items()]
    hyps.sort(key=lambda h: -h.score)
    return hyps


@dataclass
class ErrorRateReport:
    errors: int
    rate: float
    ref_empty: bool = False


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    """Uniform-cost edit distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def error_rate(hyp: Sequence[int], ref: Sequence[int]) -> ErrorRateReport:
    """Edit distance normalized by reference length.

    An empty reference is flagged and the rate falls back to dividing by
    one so a nonempty hypothesis still registers as errorful.
    """
    errors = levenshtein(list(hyp), list(ref))
    return ErrorRateReport(errors=errors,
                           rate=errors / max(len(ref), 1),
                           ref_empty=len(ref) == 0)
