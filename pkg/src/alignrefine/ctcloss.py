"""CTC negative log marginal likelihood with gradients, plus an exhaustive
enumeration oracle for small instances.

The loss marginalizes over every length-T alignment whose collapse equals the
target, via the standard forward DP over the blank-interleaved extended
sequence. Gradients come from a hand-coded forward-backward pass wired into
the autodiff tape as a single primitive.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import alignkit
from .alignkit import BLANK_ID, collapse
from .numcore import ContractViolation, FLOAT, Tensor, _node, logsumexp_np

NEG_INF = -np.inf


@dataclass
class CtcInstance:
    """Row log-softmax outputs [T x (V+1)] and a blank-free target."""

    log_probs: Tensor
    target: tuple[int, ...]

    def __post_init__(self):
        self.target = tuple(int(t) for t in self.target)
        if any(t == BLANK_ID for t in self.target):
            raise ContractViolation("CTC target must not contain blanks")


def min_frames(target) -> int:
    """Shortest alignment that can collapse to `target`: one frame per label
    plus a separating blank per adjacent repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def is_feasible(num_frames: int, target) -> bool:
    return num_frames >= min_frames(target)


def _extended(target) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK_ID, dtype=np.int64)
    ext[1::2] = target
    return ext


def _forward_alphas(lp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Log-space forward variables alpha[t, s] over the extended sequence."""
    T = lp.shape[0]
    S = len(ext)
    # skip transition s-2 -> s allowed where ext[s] is a label differing from ext[s-2]
    can_skip = np.zeros(S, dtype=bool)
    if S > 2:
        can_skip[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev))[:S]
        skip = np.concatenate(([NEG_INF, NEG_INF], prev))[:S]
        skip = np.where(can_skip, skip, NEG_INF)
        merged = logsumexp_np(np.stack([stay, step, skip]), axis=0)
        alpha[t] = merged + lp[t, ext]
    return alpha


def _backward_betas(lp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Log-space beta[t, s]: completion probability from state s after the
    emission at frame t (so alpha + beta covers each path exactly once)."""
    T = lp.shape[0]
    S = len(ext)
    can_land = np.zeros(S, dtype=bool)  # s -> s+2 allowed (same rule, viewed from s)
    if S > 2:
        can_land[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))
        skip = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))[:S]
        skip = np.where(np.concatenate((can_land[2:], [False, False]))[:S], skip, NEG_INF)
        beta[t] = logsumexp_np(np.stack([stay, step, skip]), axis=0)
    return beta


def ctc_loss(inst: CtcInstance) -> Tensor:
    """-log P(target | log_probs) as a scalar tape node.

    Infeasible targets (too few frames) give a +inf constant with no
    gradient; callers decide whether to skip the instance.
    """
    lp_t = inst.log_probs
    lp = lp_t.data
    if lp.ndim != 2 or lp.shape[0] < 1:
        raise ContractViolation(f"log_probs must be [T x classes] with T >= 1, got {lp.shape}")
    target = inst.target
    if not is_feasible(lp.shape[0], target):
        return Tensor(np.inf)

    ext = _extended(target)
    alpha = _forward_alphas(lp, ext)
    S = len(ext)
    tail = alpha[-1, S - 1] if S == 1 else logsumexp_np(alpha[-1, S - 2:], axis=0)
    log_z = float(tail)
    if not np.isfinite(log_z):
        return Tensor(np.inf)

    def bwd(g):
        beta = _backward_betas(lp, ext)
        post = alpha + beta - log_z  # log posterior of being in state s at frame t
        grad = np.zeros_like(lp)
        occ = np.exp(post)
        np.add.at(grad.T, ext, occ.T)  # accumulate states sharing a class
        return (g * (-grad),)

    return _node(np.asarray(-log_z), (lp_t,), bwd)


def ctc_loss_oracle(log_probs, target) -> float:
    """Enumerate every length-T token sequence, keep those collapsing to the
    target, and sum path probabilities exactly. For small instances only."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    T, classes = lp.shape
    if classes ** T > 10 ** 6:
        raise ContractViolation(f"oracle instance too large: {classes}^{T}")
    target = tuple(target)
    total = NEG_INF
    for path in itertools.product(range(classes), repeat=T):
        if collapse(path) != target:
            continue
        total = np.logaddexp(total, sum(lp[t, k] for t, k in enumerate(path)))
    return float(-total) if np.isfinite(total) else math.inf


def ctc_batch_loss(instances) -> tuple[Tensor, int]:
    """Mean loss over feasible instances; returns (loss, skipped count)."""
    losses = []
    skipped = 0
    for inst in instances:
        loss = ctc_loss(inst)
        if np.isinf(loss.data):
            skipped += 1
        else:
            losses.append(loss)
    if not losses:
        raise ContractViolation("all CTC instances in the batch are infeasible")
    if len(losses) == 1:
        return losses[0], skipped
    from .numcore import mean_of

    return mean_of(losses), skipped
