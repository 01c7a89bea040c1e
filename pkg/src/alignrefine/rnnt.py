"""First-pass streaming transducer.

A causal self-attention encoder, a one-layer recurrent prediction network,
and an additive joint network, trained with the transducer lattice loss and
decoded frame-synchronously so every hypothesis carries a full frame-level
alignment (exactly one blank per consumed frame).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .alignkit import BLANK_ID, Vocab
from .layers import Linear, LayerNorm, TransformerLayer, causal_bias, make_param, sinusoidal_positions
from .numcore import ContractViolation, Rng, Tensor


@dataclass(frozen=True)
class FirstPassConfig:
    num_labels: int
    feature_dim: int
    layers: int = 3
    dim: int = 64
    heads: int = 4
    ffn_mult: int = 4
    max_emit_per_frame: int = 4

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.num_labels)


class FirstPassModel:
    """Holds the parameter set and the three submodule forwards."""

    def __init__(self, config: FirstPassConfig, rng: Rng):
        self.config = config
        self.params: dict[str, nc.Parameter] = {}
        p, d = self.params, config.dim
        self.in_proj = Linear(p, "enc0.inproj", config.feature_dim, d, rng)
        self.enc_layers = [
            TransformerLayer(p, f"enc0.layer{i}", d, config.heads, config.ffn_mult, rng)
            for i in range(config.layers)
        ]
        self.enc_norm = LayerNorm(p, "enc0.final", d, rng)
        # prediction network: embedding row 0 doubles as the start-of-sequence
        # token (decoding feeds only non-blank labels back, ids 1..V)
        self.emb = make_param(p, "pred.emb", (config.num_labels + 1, d), rng, kind="embedding")
        self.pred_wx = make_param(p, "pred.wx", (d, d), rng)
        self.pred_wh = make_param(p, "pred.wh", (d, d), rng)
        self.pred_b = make_param(p, "pred.b", (d,), rng, kind="zeros")
        self.joint_we = make_param(p, "joint.we", (d, d), rng)
        self.joint_wp = make_param(p, "joint.wp", (d, d), rng)
        self.joint_b = make_param(p, "joint.b", (d,), rng, kind="zeros")
        self.joint_wo = make_param(p, "joint.wo", (d, config.num_labels + 1), rng)
        self.joint_bo = make_param(p, "joint.bo", (config.num_labels + 1,), rng, kind="zeros")

    # ---- tape forwards -------------------------------------------------

    def encode_causal(self, features: np.ndarray) -> Tensor:
        """(T', F) features -> (T', D) causal frame encodings.

        Frame t never attends past t, so perturbing any later input frame
        leaves rows 0..t bit-identical.
        """
        t = features.shape[0]
        if t < 1:
            raise ContractViolation("encode_causal needs at least one frame")
        x = self.in_proj(Tensor(np.asarray(features, dtype=nc.FLOAT)))
        x = nc.add(x, Tensor(sinusoidal_positions(t, self.config.dim)))
        bias = causal_bias(t)
        for layer in self.enc_layers:
            x = layer(x, self_bias=bias)
        return self.enc_norm(x)

    def pred_forward(self, target: tuple[int, ...]) -> Tensor:
        """(U,) labels -> (U+1, D) prediction states g_0..g_U, where g_u has
        consumed the first u labels (g_0 only the start token)."""
        vocab = self.config.vocab
        for y in target:
            if not 1 <= y <= vocab.num_labels:
                raise ContractViolation(f"target id {y} out of range")
        h = Tensor(np.zeros(self.config.dim))
        outs = []
        for tok in (BLANK_ID,) + tuple(target):
            e = nc.reshape(nc.embedding_lookup(self.emb, np.array([tok])), (self.config.dim,))
            h = nc.tanh(nc.add(nc.add(nc.matmul(e, self.pred_wx), nc.matmul(h, self.pred_wh)), self.pred_b))
            outs.append(nc.reshape(h, (1, self.config.dim)))
        return nc.concat(outs, axis=0)

    def joint_log_probs(self, enc: Tensor, pred: Tensor) -> Tensor:
        """(T', D) x (U+1, D) -> (T', U+1, V+1) log-probabilities."""
        tp = enc.shape[0]
        up1 = pred.shape[0]
        e = nc.reshape(nc.matmul(enc, self.joint_we), (tp, 1, self.config.dim))
        p = nc.reshape(nc.matmul(pred, self.joint_wp), (1, up1, self.config.dim))
        hidden = nc.tanh(nc.add(nc.add(e, p), self.joint_b))
        logits = nc.add(nc.matmul(hidden, self.joint_wo), self.joint_bo)
        return nc.log_softmax_rows(logits)

    def rnnt_loss(self, enc: Tensor, target: tuple[int, ...]) -> Tensor:
        """Negative log marginal over all monotone lattice paths emitting
        `target`; any target is reachable (labels stack freely on a frame)."""
        pred = self.pred_forward(tuple(target))
        lattice = self.joint_log_probs(enc, pred)
        return lattice_loss(lattice, tuple(target))

    def loss(self, features: np.ndarray, target: tuple[int, ...]) -> Tensor:
        return self.rnnt_loss(self.encode_causal(features), target)

    # ---- plain-array inference steps ------------------------------------
    # Verified against the tape lattice in tests; decoding uses these so a
    # beam step is two small matvecs instead of a tape graph.

    def pred_start_np(self) -> np.ndarray:
        return np.zeros(self.config.dim)

    def pred_step_np(self, state: np.ndarray, token: int) -> np.ndarray:
        e = self.emb.data[token]
        return np.tanh(e @ self.pred_wx.data + state @ self.pred_wh.data + self.pred_b.data)

    def joint_step_np(self, enc_t: np.ndarray, pred_state: np.ndarray) -> np.ndarray:
        h = np.tanh(enc_t @ self.joint_we.data + pred_state @ self.joint_wp.data + self.joint_b.data)
        logits = h @ self.joint_wo.data + self.joint_bo.data
        return logits - nc.logsumexp_np(logits, axis=-1)

    def encode_causal_np(self, features: np.ndarray) -> np.ndarray:
        with nc.no_grad():
            return self.encode_causal(features).data


def lattice_loss(lattice: Tensor, target: tuple[int, ...]) -> Tensor:
    """-log of the summed probability of all alignments of `target` over a
    (T', U+1, V+1) log-probability lattice.

    Forward variables live on the (T'+1) x (U+1) state grid in log space:
    blank consumes a frame, (t,u) -> (t+1,u); label y_{u+1} stays on the
    frame, (t,u) -> (t,u+1). The gradient is the negated path-posterior
    occupancy of each lattice transition, installed as one tape primitive.
    """
    tp, up1, _ = lattice.shape
    u_len = len(target)
    if up1 != u_len + 1:
        raise ContractViolation(f"lattice label axis {up1} != len(target)+1 ({u_len + 1})")

    lp = lattice.data
    neg = -np.inf
    alpha = np.full((tp + 1, up1), neg)
    alpha[0, 0] = 0.0
    for t in range(tp + 1):
        for u in range(up1):
            if t == 0 and u == 0:
                continue
            best = neg
            if t > 0:
                best = alpha[t - 1, u] + lp[t - 1, u, BLANK_ID]
            # label transitions emit at frame t, so they exist only for t < T'
            if u > 0 and t < tp:
                best = np.logaddexp(best, alpha[t, u - 1] + lp[t, u - 1, target[u - 1]])
            alpha[t, u] = best
    log_z = alpha[tp, up1 - 1]

    def bwd(g: float):
        beta = np.full((tp + 1, up1), neg)
        beta[tp, up1 - 1] = 0.0
        for t in range(tp, -1, -1):
            for u in range(up1 - 1, -1, -1):
                if t == tp and u == up1 - 1:
                    continue
                acc = neg
                if t < tp:
                    acc = lp[t, u, BLANK_ID] + beta[t + 1, u]
                if u < up1 - 1 and t < tp:
                    acc = np.logaddexp(acc, lp[t, u, target[u]] + beta[t, u + 1])
                beta[t, u] = acc
        grad = np.zeros_like(lp)
        for t in range(tp):
            for u in range(up1):
                occ_blank = alpha[t, u] + lp[t, u, BLANK_ID] + beta[t + 1, u] - log_z
                grad[t, u, BLANK_ID] += np.exp(occ_blank)
                if u < up1 - 1:
                    occ_lab = alpha[t, u] + lp[t, u, target[u]] + beta[t, u + 1] - log_z
                    grad[t, u, target[u]] += np.exp(occ_lab)
        return (g * (-grad),)

    return nc._node(np.asarray(-log_z), (lattice,), bwd)


@dataclass
class DecodeHypothesis:
    labels: tuple[int, ...]
    alignment: tuple[int, ...]
    log_score: float
    pred_state: np.ndarray = field(repr=False, default=None)


def _hyp_order(h: DecodeHypothesis):
    return (-h.log_score, h.alignment)


def decode(model, features: np.ndarray, beam_size: int = 1,
           max_emit_per_frame: int = 4, enc: np.ndarray | None = None) -> list[DecodeHypothesis]:
    """Frame-synchronous beam search emitting full alignments.

    Per frame each live hypothesis may emit up to max_emit_per_frame labels
    (each fed back to the prediction network) before a blank advances the
    frame; at the emission cap the blank is forced. A label equal to the
    immediately preceding alignment token is never proposed, so alignments
    collapse exactly back to their hypothesis labels (repeats need a blank
    between them). Expansion candidates are pruned to beam_size at every
    emission level, so beam_size=1 reduces to a pure greedy argmax loop over
    the allowed moves (ties prefer the blank, matching argmax's lowest-id
    rule). Returns hypotheses sorted best-first; every alignment contains
    exactly T' blanks.
    """
    if beam_size < 1 or max_emit_per_frame < 1:
        raise ContractViolation("beam_size and max_emit_per_frame must be >= 1")
    if enc is None:
        enc = model.encode_causal_np(features)
    num_classes = model.joint_step_np(enc[0], model.pred_start_np()).shape[0]

    beams = [DecodeHypothesis((), (), 0.0, model.pred_start_np())]
    for t in range(enc.shape[0]):
        finished: list[DecodeHypothesis] = []
        active = beams
        for level in range(max_emit_per_frame + 1):
            forced = level == max_emit_per_frame
            cands = []
            for hyp in active:
                lp = model.joint_step_np(enc[t], hyp.pred_state)
                cands.append((hyp.log_score + lp[BLANK_ID], hyp, BLANK_ID))
                if not forced:
                    last = hyp.alignment[-1] if hyp.alignment else BLANK_ID
                    for k in range(1, num_classes):
                        if k != last:
                            cands.append((hyp.log_score + lp[k], hyp, k))
            cands.sort(key=lambda c: (-c[0], c[1].alignment + (c[2],)))
            active = []
            for score, parent, tok in cands[:beam_size]:
                if tok == BLANK_ID:
                    finished.append(DecodeHypothesis(
                        parent.labels, parent.alignment + (BLANK_ID,), score, parent.pred_state))
                else:
                    active.append(DecodeHypothesis(
                        parent.labels + (tok,), parent.alignment + (tok,), score,
                        model.pred_step_np(parent.pred_state, tok)))
            if not active:
                break
        beams = sorted(finished, key=_hyp_order)[:beam_size]
    return sorted(beams, key=_hyp_order)


def spec_augment(features: np.ndarray, rng: Rng, num_time_masks: int = 2,
                 max_time_frac: float = 0.1, num_feat_masks: int = 1,
                 max_feat_frac: float = 0.25) -> np.ndarray:
    """Zero random time spans and feature channels (training-time only).

    Mask lengths are drawn in [0, ceil(frac * extent)] so a single time mask
    zeroes at most ceil(max_time_frac * T') consecutive frames. The input is
    never mutated; all draws come from `rng` in a fixed order.
    """
    out = np.array(features, dtype=nc.FLOAT, copy=True)
    tp, f = out.shape
    max_t = math.ceil(max_time_frac * tp)
    for _ in range(num_time_masks):
        length = int(rng.integers(0, max_t + 1))
        start = int(rng.integers(0, tp - length + 1))
        out[start:start + length, :] = 0.0
    max_f = math.ceil(max_feat_frac * f)
    for _ in range(num_feat_masks):
        width = int(rng.integers(0, max_f + 1))
        start = int(rng.integers(0, f - width + 1))
        out[:, start:start + width] = 0.0
    return out
