"""Independent reference implementations used only by tests and the verify
suites. Everything here is written straightforwardly on plain numpy arrays,
on purpose duplicating none of the tape code paths: agreement between a fast
implementation and its slow twin is the check.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import erf

from .alignkit import BLANK_ID


# ---------------------------------------------------------------------------
# Transducer loss by exhaustive path enumeration
# ---------------------------------------------------------------------------


def rnnt_loss_enumerate(lattice: np.ndarray, target) -> float:
    """-log sum over every monotone lattice path emitting `target`, summed by
    brute force over all C(T'+U, U) frame placements of the labels."""
    target = tuple(target)
    tp = lattice.shape[0]
    u_len = len(target)
    total = -np.inf
    for frames in itertools.combinations_with_replacement(range(tp), u_len):
        logp = 0.0
        t = u = 0
        for label, frame in zip(target, frames):
            while t < frame:
                logp += lattice[t, u, BLANK_ID]
                t += 1
            logp += lattice[t, u, label]
            u += 1
        while t < tp:
            logp += lattice[t, u, BLANK_ID]
            t += 1
        total = np.logaddexp(total, logp)
    return float(-total)


# ---------------------------------------------------------------------------
# Greedy transducer decoding, rebuilt from raw parameter arrays
# ---------------------------------------------------------------------------


def greedy_decode_reference(model, features: np.ndarray, max_emit_per_frame: int = 4):
    """Pure argmax decoding loop reading the first-pass parameter arrays
    directly (no model forward methods). Returns (labels, alignment)."""
    enc = model.encode_causal_np(features)
    w = {name: p.data for name, p in model.params.items()}

    def pred(state, token):
        z = w["pred.emb"][token] @ w["pred.wx"] + state @ w["pred.wh"] + w["pred.b"]
        return np.tanh(z)

    def joint(enc_t, state):
        h = np.tanh(enc_t @ w["joint.we"] + state @ w["joint.wp"] + w["joint.b"])
        logits = h @ w["joint.wo"] + w["joint.bo"]
        m = logits.max()
        return logits - (m + math.log(np.exp(logits - m).sum()))

    state = np.zeros(model.config.dim)
    labels, alignment = [], []
    for t in range(enc.shape[0]):
        emitted = 0
        while True:
            lp = joint(enc[t], state).copy()
            last = alignment[-1] if alignment else BLANK_ID
            if last != BLANK_ID:
                lp[last] = -np.inf  # a repeat needs a blank between
            k = int(np.argmax(lp))
            if k == BLANK_ID or emitted == max_emit_per_frame:
                alignment.append(BLANK_ID)
                break
            labels.append(k)
            alignment.append(k)
            state = pred(state, k)
            emitted += 1
    return tuple(labels), tuple(alignment)


# ---------------------------------------------------------------------------
# Refinement decoder stack, re-implemented head by head
# ---------------------------------------------------------------------------


def _softmax_ref(row: np.ndarray) -> np.ndarray:
    e = np.exp(row - row.max())
    return e / e.sum()


def _layer_norm_ref(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * gain + bias


def _gelu_ref(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def _positions_ref(length: int, dim: int) -> np.ndarray:
    pe = np.zeros((length, dim))
    for t in range(length):
        for i in range(0, dim, 2):
            div = math.exp(-(i / dim) * math.log(10000.0))
            pe[t, i] = math.sin(t * div)
            if i + 1 < dim:
                pe[t, i + 1] = math.cos(t * div)
    return pe


def _attention_ref(w, prefix: str, q_in: np.ndarray, kv_in: np.ndarray,
                   heads: int, bias: np.ndarray | None) -> np.ndarray:
    d = q_in.shape[1]
    dh = d // heads
    q = q_in @ w[f"{prefix}.wq.w"] + w[f"{prefix}.wq.b"]
    k = kv_in @ w[f"{prefix}.wk.w"] + w[f"{prefix}.wk.b"]
    v = kv_in @ w[f"{prefix}.wv.w"] + w[f"{prefix}.wv.b"]
    mixed = np.zeros((q_in.shape[0], d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for ti in range(q_in.shape[0]):
            scores = (k[:, sl] @ q[ti, sl]) / math.sqrt(dh)
            if bias is not None:
                scores = scores + bias[ti]
            attn = _softmax_ref(scores)
            mixed[ti, sl] = attn @ v[:, sl]
    return mixed @ w[f"{prefix}.wo.w"] + w[f"{prefix}.wo.b"]


def _ffn_ref(w, prefix: str, x: np.ndarray) -> np.ndarray:
    h = _gelu_ref(x @ w[f"{prefix}.lin1.w"] + w[f"{prefix}.lin1.b"])
    return h @ w[f"{prefix}.lin2.w"] + w[f"{prefix}.lin2.b"]


def refine_forward_reference(model, a_in, audio: np.ndarray) -> np.ndarray:
    """Independent forward of the whole second-pass decoder stack on plain
    arrays: embedding + positions, per-head attention loops, GELU feed
    forward, final norm, log-softmax. Cross-checks refine_step's log_probs."""
    cfg = model.config
    w = {name: p.data for name, p in model.params.items()}
    a_in = tuple(int(t) for t in a_in)
    x = w["dec1.emb"][list(a_in)] + _positions_ref(len(a_in), cfg.dim)
    for i in range(cfg.layers):
        pre = f"dec1.layer{i}"
        xn = _layer_norm_ref(x, w[f"{pre}.ln1.gain"], w[f"{pre}.ln1.bias"])
        x = x + _attention_ref(w, f"{pre}.selfattn", xn, xn, cfg.heads, None)
        xc = _layer_norm_ref(x, w[f"{pre}.lncross.gain"], w[f"{pre}.lncross.bias"])
        x = x + _attention_ref(w, f"{pre}.crossattn", xc, audio, cfg.heads, None)
        xf = _layer_norm_ref(x, w[f"{pre}.ln2.gain"], w[f"{pre}.ln2.bias"])
        x = x + _ffn_ref(w, f"{pre}.ffn", xf)
    x = _layer_norm_ref(x, w["dec1.final.gain"], w["dec1.final.bias"])
    logits = x @ w["dec1.out.w"] + w["dec1.out.b"]
    lse = np.log(np.exp(logits - logits.max(axis=-1, keepdims=True)).sum(axis=-1, keepdims=True))
    return logits - logits.max(axis=-1, keepdims=True) - lse


def cascade_forward_reference(model, h0: np.ndarray) -> np.ndarray:
    """Independent forward of the banded cascade encoder."""
    cfg = model.config
    w = {name: p.data for name, p in model.params.items()}
    x = np.asarray(h0, dtype=np.float64)
    if "enc1.inproj.w" in w:
        x = x @ w["enc1.inproj.w"] + w["enc1.inproj.b"]
    if cfg.cascade_layers == 0:
        return x
    t = x.shape[0]
    bias = np.zeros((t, t))
    for qi in range(t):
        bias[qi, min(t, qi + cfg.right_context + 1):] = -1.0e30
    for i in range(cfg.cascade_layers):
        pre = f"enc1.layer{i}"
        xn = _layer_norm_ref(x, w[f"{pre}.ln1.gain"], w[f"{pre}.ln1.bias"])
        x = x + _attention_ref(w, f"{pre}.selfattn", xn, xn, cfg.heads, bias)
        xf = _layer_norm_ref(x, w[f"{pre}.ln2.gain"], w[f"{pre}.ln2.bias"])
        x = x + _ffn_ref(w, f"{pre}.ffn", xf)
    return _layer_norm_ref(x, w["enc1.final.gain"], w["enc1.final.bias"])


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def fd_gradient_check(loss_fn, params, picks_per_param: int = 3, h: float = 1e-5,
                      rng=None) -> float:
    """Max relative error between analytic gradients (already populated on
    the parameters) and central finite differences at randomly picked
    coordinates. loss_fn re-evaluates the scalar loss from current data."""
    worst = 0.0
    for p in params:
        if p.grad is None:
            raise ValueError(f"no gradient on {p.name}")
        for _ in range(picks_per_param):
            if rng is None:
                idx = tuple(s // 2 for s in p.data.shape)
            else:
                idx = tuple(int(rng.integers(0, s)) for s in p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = loss_fn()
            p.data[idx] = orig - h
            down = loss_fn()
            p.data[idx] = orig
            fd = (up - down) / (2.0 * h)
            an = p.grad[idx]
            # floor sits above the fd noise of ~ulp(loss)/2h so exact-zero
            # gradients (e.g. attention key biases) are not false alarms
            worst = max(worst, abs(fd - an) / max(1e-6, abs(fd), abs(an)))
    return worst


# ---------------------------------------------------------------------------
# Edit distance by exhaustive script search
# ---------------------------------------------------------------------------


def edit_distance_reference(ref, hyp) -> tuple[int, set[tuple[int, int, int]]]:
    """Minimum edit cost and the set of (subs, ins, dels) splits achievable
    at that cost, found by plain recursion with memoization."""
    ref, hyp = tuple(ref), tuple(hyp)
    memo: dict = {}

    def go(i: int, j: int) -> dict[tuple[int, int, int], int]:
        # returns {(s, i, d): cost} minimal-cost splits for suffixes
        key = (i, j)
        if key in memo:
            return memo[key]
        if i == len(ref) and j == len(hyp):
            out = {(0, 0, 0): 0}
        else:
            best: dict[tuple[int, int, int], int] = {}
            cands = []
            if i < len(ref) and j < len(hyp):
                sub_cost = 0 if ref[i] == hyp[j] else 1
                for split, cost in go(i + 1, j + 1).items():
                    s, ins, dl = split
                    cands.append(((s + (1 if sub_cost else 0), ins, dl), cost + sub_cost))
            if j < len(hyp):
                for split, cost in go(i, j + 1).items():
                    s, ins, dl = split
                    cands.append(((s, ins + 1, dl), cost + 1))
            if i < len(ref):
                for split, cost in go(i + 1, j).items():
                    s, ins, dl = split
                    cands.append(((s, ins, dl + 1), cost + 1))
            low = min(c for _, c in cands)
            for split, cost in cands:
                if cost == low:
                    best[split] = cost
            out = best
        memo[key] = out
        return out

    table = go(0, 0)
    low = min(table.values())
    return low, {split for split, cost in table.items() if cost == low}
