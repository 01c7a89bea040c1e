"""Deliberation second pass: a cascaded right-context encoder over frozen
first-pass frames, and an iterative refinement decoder that rewrites a frame
alignment in parallel, trained with a CTC loss per refinement step.

All refinement steps evaluate the same parameter objects; the argmax between
steps carries no gradient, so each step is supervised independently and the
average of the per-step CTC losses is the training objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .alignkit import Vocab, collapse, greedy_alignment, mask_augment
from .ctcloss import CtcInstance, ctc_loss, is_feasible
from .layers import Linear, LayerNorm, TransformerLayer, banded_bias, make_param, sinusoidal_positions
from .numcore import ContractViolation, Rng, Tensor


class SkipSample(Exception):
    """Raised when an utterance cannot be supervised: the alignment is too
    short to ever emit the target under collapse semantics."""


@dataclass(frozen=True)
class RefineConfig:
    num_labels: int
    input_dim: int           # width of the first-pass encoder frames
    layers: int = 4          # decoder depth L
    cascade_layers: int = 0  # right-context encoder depth L'
    dim: int = 64
    heads: int = 4
    ffn_mult: int = 4
    train_steps: int = 3     # S
    infer_steps: int = 4     # R
    mask_prob: float = 0.0   # p
    dropout: float = 0.0
    right_context: int = 3   # frames of look-ahead per cascade layer
    # next-step input alignments come from a dropout-free forward; the
    # supervised forward still applies dropout (moot when dropout == 0)
    clean_step_inputs: bool = True

    def __post_init__(self):
        if self.train_steps < 1 or self.infer_steps < 1:
            raise ContractViolation("train_steps and infer_steps must be >= 1")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ContractViolation(f"mask_prob must be in [0, 1), got {self.mask_prob}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.num_labels)


class SecondPassModel:
    """Cascaded encoder (banded self-attention, right_context frames of
    look-ahead per layer) plus the refinement decoder (token embedding with a
    dedicated mask row, full-context self-attention, cross-attention with
    text as query and audio as key/value, output projection to V+1)."""

    def __init__(self, config: RefineConfig, rng: Rng):
        self.config = config
        self.params: dict[str, nc.Parameter] = {}
        p, d = self.params, config.dim

        self.in_proj = None
        if config.input_dim != d:
            self.in_proj = Linear(p, "enc1.inproj", config.input_dim, d, rng)
        self.enc_layers = [
            TransformerLayer(p, f"enc1.layer{i}", d, config.heads, config.ffn_mult, rng)
            for i in range(config.cascade_layers)
        ]
        self.enc_norm = LayerNorm(p, "enc1.final", d, rng) if config.cascade_layers else None

        vocab = config.vocab
        self.emb = make_param(p, "dec1.emb", (vocab.num_embeddable, d), rng, kind="embedding")
        self.dec_layers = [
            TransformerLayer(p, f"dec1.layer{i}", d, config.heads, config.ffn_mult, rng, cross=True)
            for i in range(config.layers)
        ]
        self.dec_norm = LayerNorm(p, "dec1.final", d, rng)
        self.out_proj = Linear(p, "dec1.out", d, vocab.num_classes, rng)


def cascade_encode(model: SecondPassModel, h0) -> Tensor:
    """(T', D0) frozen first-pass frames -> (T', D) audio features with
    bounded look-ahead: output frame t never depends on input frames beyond
    t + right_context * cascade_layers. With no cascade layers this is the
    identity (or a width projection when dims differ)."""
    cfg = model.config
    x = h0 if isinstance(h0, Tensor) else Tensor(np.asarray(h0, dtype=nc.FLOAT))
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractViolation(f"cascade_encode expects (T', D0) frames, got {x.shape}")
    if model.in_proj is not None:
        x = model.in_proj(x)
    if not model.enc_layers:
        return x
    bias = banded_bias(x.shape[0], cfg.right_context)
    for layer in model.enc_layers:
        x = layer(x, self_bias=bias)
    return model.enc_norm(x)


def refine_step(model: SecondPassModel, a_in, audio: Tensor,
                training: bool = False, rng: Rng | None = None):
    """One parallel rewrite of an alignment.

    Returns (log_probs, a_out): log_probs is (T, V+1) on the tape, a_out is
    the per-position argmax (plain ids, never the mask). Output length always
    equals input length.
    """
    cfg = model.config
    vocab = cfg.vocab
    a_in = tuple(int(t) for t in a_in)
    if len(a_in) < 1:
        raise ContractViolation("refine_step needs a nonempty alignment")
    for t in a_in:
        if not 0 <= t <= vocab.mask_id:
            raise ContractViolation(f"alignment token {t} outside embeddable range")
    x = nc.embedding_lookup(model.emb, np.array(a_in, dtype=np.int64))
    x = nc.add(x, Tensor(sinusoidal_positions(len(a_in), cfg.dim)))
    rate = cfg.dropout if training else 0.0
    for layer in model.dec_layers:
        x = layer(x, self_bias=None, memory=audio,
                  dropout_rate=rate, rng=rng, training=training)
    log_probs = nc.log_softmax_rows(model.out_proj(model.dec_norm(x)))
    a_out = greedy_alignment(log_probs.data)
    return log_probs, a_out


def refine_train_loss(model: SecondPassModel, enc1_out: Tensor, a0, target,
                      s_steps: int, p: float, rng: Rng) -> Tensor:
    """Average CTC loss over s_steps refinement steps.

    Each step masks the previous step's clean argmax output (step 1 masks
    a0) with probability p per position, rewrites it, and is scored against
    the target. Raises SkipSample when the alignment is too short for the
    target to be emitted at all.
    """
    target = tuple(int(y) for y in target)
    a_prev = tuple(int(t) for t in a0)
    if not is_feasible(len(a_prev), target):
        raise SkipSample(f"alignment length {len(a_prev)} cannot emit target of "
                         f"collapsed length requirement")
    cfg = model.config
    losses = []
    for i in range(s_steps):
        a_in = mask_augment(a_prev, p, rng.split("mask", i), cfg.vocab)
        log_probs, a_next = refine_step(model, a_in, enc1_out,
                                        training=True, rng=rng.split("dropout", i))
        losses.append(ctc_loss(CtcInstance(log_probs, target)))
        if cfg.dropout > 0 and cfg.clean_step_inputs:
            with nc.no_grad():
                _, a_next = refine_step(model, a_in, enc1_out)
        a_prev = tuple(a_next)
    return nc.mean_of(losses)


def refine_alignments(model: SecondPassModel, enc1_out: Tensor, a0,
                      r_steps: int) -> list[tuple[int, ...]]:
    """A^1..A^R from iterating refine_step with no masking (inference)."""
    with nc.no_grad():
        a = tuple(int(t) for t in a0)
        out = []
        for _ in range(r_steps):
            _, a = refine_step(model, a, enc1_out)
            a = tuple(a)
            out.append(a)
        return out


def refine_decode(model: SecondPassModel, enc1_out: Tensor, a0, r_steps: int):
    """(final hypothesis, per-step hypotheses): collapse of each A^i for
    i=1..r_steps, final being the last. Parallel greedy only, no masks."""
    if r_steps < 1:
        raise ContractViolation("r_steps must be >= 1")
    aligns = refine_alignments(model, enc1_out, a0, r_steps)
    per_step = [tuple(collapse(a)) for a in aligns]
    return per_step[-1], per_step
