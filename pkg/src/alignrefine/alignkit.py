"""Alignment algebra: vocabulary, the collapse operator, greedy alignment
extraction, mask augmentation, and edit-distance scoring.

Alignments and label sequences are plain tuples of ints, so they are
hashable, immutable, and safe to map over in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .numcore import ContractViolation, Rng, Tensor

BLANK_ID = 0


@dataclass(frozen=True)
class Vocab:
    """Token id layout: blank is 0, labels are 1..num_labels, mask is one past.

    The model softmax has `num_classes` = num_labels + 1 outputs; the mask id
    is embeddable on the input side but can never be emitted.
    """

    num_labels: int

    def __post_init__(self):
        if self.num_labels < 1:
            raise ContractViolation("vocabulary needs at least one label")

    @property
    def blank_id(self) -> int:
        return BLANK_ID

    @property
    def mask_id(self) -> int:
        return self.num_labels + 1

    @property
    def num_classes(self) -> int:
        return self.num_labels + 1

    @property
    def num_embeddable(self) -> int:
        return self.num_labels + 2

    def labels(self) -> range:
        return range(1, self.num_labels + 1)


def collapse(alignment: Sequence[int], vocab: Vocab | None = None) -> tuple[int, ...]:
    """Merge adjacent repeats, then drop blanks."""
    if vocab is not None and any(t == vocab.mask_id for t in alignment):
        raise ContractViolation("cannot collapse an alignment containing masks")
    out = []
    prev = None
    for t in alignment:
        if t != prev:
            if t != BLANK_ID:
                out.append(t)
            prev = t
    return tuple(out)


def expand(labels: Sequence[int], repeats: Sequence[int], blank_runs: Sequence[int]) -> tuple[int, ...]:
    """Inverse-ish of collapse for property tests: duplicate label k
    `repeats[k]` times and insert `blank_runs` blanks around them."""
    out = [BLANK_ID] * blank_runs[0]
    for i, lab in enumerate(labels):
        out.extend([lab] * repeats[i])
        out.extend([BLANK_ID] * blank_runs[i + 1])
    return tuple(out)


def greedy_alignment(posteriors) -> tuple[int, ...]:
    """Position-wise argmax over rows of a [T x num_classes] score matrix.

    Accepts probabilities or logits (argmax is order-preserving); ties break
    to the lowest token id, which prefers blank. Positions are independent.
    """
    data = posteriors.data if isinstance(posteriors, Tensor) else np.asarray(posteriors)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ContractViolation(f"need a nonempty [T x classes] matrix, got {data.shape}")
    return tuple(int(i) for i in np.argmax(data, axis=1))


def mask_augment(alignment: Sequence[int], p: float, rng: Rng, vocab: Vocab) -> tuple[int, ...]:
    """Independently replace each position by the mask id with probability p.

    Always draws len(alignment) uniforms so the rng advances the same way
    for every p, including p=0.
    """
    if not 0.0 <= p <= 1.0:
        raise ContractViolation(f"mask probability must be in [0, 1], got {p}")
    draws = rng.uniform(len(alignment))
    return tuple(vocab.mask_id if d < p else t for t, d in zip(alignment, draws))


class EditCounts(NamedTuple):
    subs: int
    ins: int
    dels: int

    @property
    def total(self) -> int:
        return self.subs + self.ins + self.dels


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> EditCounts:
    """Minimal unit-cost edit counts; ties in the backtrace prefer
    substitution over deletion over insertion."""
    ops = edit_ops(ref, hyp)
    subs = sum(1 for op, _, _ in ops if op == "S")
    ins = sum(1 for op, _, _ in ops if op == "I")
    dels = sum(1 for op, _, _ in ops if op == "D")
    return EditCounts(subs, ins, dels)


def edit_ops(ref: Sequence[int], hyp: Sequence[int]) -> list[tuple[str, int, int]]:
    """Alignment script as (op, ref_index, hyp_index) with op in {=, S, I, D}.

    Deletions carry hyp_index of the gap; insertions carry ref_index of the gap.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = d[i - 1, j] + 1
            ins = d[i, j - 1] + 1
            d[i, j] = min(sub, dele, ins)
    ops: list[tuple[str, int, int]] = []
    i, j = n, m
    while i > 0 or j > 0:
        # preference on cost ties: substitution/match, then deletion, then insertion
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("=" if ref[i - 1] == hyp[j - 1] else "S", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops.append(("D", i - 1, j))
            i -= 1
        else:
            ops.append(("I", i, j - 1))
            j -= 1
    ops.reverse()
    return ops


def wer_percent(counts: EditCounts, ref_len: int) -> float:
    """Token error rate in percent; denominator is max(1, reference length)."""
    return 100.0 * counts.total / max(1, ref_len)


def corpus_wer(pairs) -> float:
    """WER over (ref, hyp) pairs: total edits over total reference length."""
    edits = 0
    ref_len = 0
    for ref, hyp in pairs:
        edits += edit_distance(ref, hyp).total
        ref_len += len(ref)
    return 100.0 * edits / max(1, ref_len)


# ---------------------------------------------------------------------------
# Debug text format: blank prints as "_", mask as "?", labels as integers.
# ---------------------------------------------------------------------------


def format_tokens(tokens: Sequence[int], vocab: Vocab) -> str:
    parts = []
    for t in tokens:
        if t == BLANK_ID:
            parts.append("_")
        elif t == vocab.mask_id:
            parts.append("?")
        else:
            parts.append(str(t))
    return " ".join(parts)


def parse_tokens(text: str, vocab: Vocab) -> tuple[int, ...]:
    out = []
    for part in text.split():
        if part == "_":
            out.append(BLANK_ID)
        elif part == "?":
            out.append(vocab.mask_id)
        else:
            tok = int(part)
            if not 1 <= tok <= vocab.num_labels:
                raise ContractViolation(f"token {tok} outside vocabulary of {vocab.num_labels}")
            out.append(tok)
    return tuple(out)
