"""Dense float64 tensors with reverse-mode autodiff, a counter-based RNG,
and an Adam optimizer step.

Everything above this module is written against three contracts: ops build a
tape whose `backward` fills parameter gradients, draws from `Rng` are
reproducible from the seed alone, and all data is float64 so finite-difference
checks are trustworthy.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

FLOAT = np.float64

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ContractViolation(ValueError):
    """An operation was called outside its stated preconditions."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_grad_mode = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording; ops return plain constant tensors."""
    prev = _grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray.

    Tensors are immutable once built (data is never written in place by ops),
    which makes them safe to hand across threads during evaluation.
    """

    __slots__ = ("data", "grad", "_parents", "_bwd")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=FLOAT)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """A named leaf tensor; `backward` deposits d(loss)/d(value) in `.grad`."""

    __slots__ = ("name", "adam_m", "adam_v")

    def __init__(self, name: str, data):
        super().__init__(data)
        self.name = name
        self.adam_m: np.ndarray | None = None
        self.adam_v: np.ndarray | None = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if _grad_enabled():
        out._parents = parents
        out._bwd = bwd
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, params) -> None:
    """Fill `p.grad` with d(loss)/d(p) for every Parameter in `params`.

    Gradients are overwritten on every call (never accumulated across calls).
    `loss` must be a scalar produced by a forward pass.
    """
    if loss.data.shape != ():
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.data.shape}")
    params = list(params)

    # Iterative post-order DFS: parents appear before consumers in `order`.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=FLOAT)}
    for node in reversed(order):
        if node._bwd is None:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._bwd(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    for p in params:
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.data) if g is None else np.reshape(g, p.data.shape)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def constant(data) -> Tensor:
    return Tensor(data)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy `@` semantics on the last two axes.

    1-d operands follow numpy's promotion (vector @ matrix, matrix @ vector):
    the backward pass promotes to 2-d, differentiates, then strips the axis.
    """
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ContractViolation(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        a2 = a.data[None, :] if a.data.ndim == 1 else a.data
        b2 = b.data[:, None] if b.data.ndim == 1 else b.data
        g2 = np.asarray(g)
        if a.data.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.data.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape)
        gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape)
        if a.data.ndim == 1:
            ga = ga.reshape(a.data.shape)
        if b.data.ndim == 1:
            gb = gb.reshape(b.data.shape)
        return ga, gb

    return _node(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = np.swapaxes(a.data, -1, -2)
    return _node(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractViolation("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def mean_of(tensors) -> Tensor:
    """Mean of scalar tensors (batch reduction in given order)."""
    tensors = list(tensors)
    if not tensors:
        raise ContractViolation("mean_of zero tensors")
    n = len(tensors)
    out = np.asarray(sum(t.data for t in tensors) / n)
    return _node(out, tuple(tensors), lambda g: tuple(g / n for _ in tensors))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _node(s, (x,), bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    lp = shifted - lse

    def bwd(g):
        return (g - np.exp(lp) * g.sum(axis=-1, keepdims=True),)

    return _node(lp, (x,), bwd)


def logsumexp(xs) -> float:
    """log sum exp of a nonempty float sequence; -inf entries are absorbed."""
    xs = [float(v) for v in xs]
    if not xs:
        raise ContractViolation("logsumexp of empty sequence")
    m = max(xs)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(v - m) for v in xs))


def logsumexp_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Array version used inside DP loops; all -inf rows give -inf."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes) if axes else g * xhat
        dbias = g.sum(axis=axes) if axes else g
        return dx, dgain.reshape(gain.data.shape), dbias.reshape(bias.data.shape)

    return _node(out, (x, gain, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return _node(out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by integer ids; grad scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractViolation("embedding ids must be a 1-d sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ContractViolation("embedding id out of range")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node(out, (table,), bwd)


def dropout(x: Tensor, rate: float, rng: "Rng", training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.uniform(x.data.shape) >= rate).astype(FLOAT) / (1.0 - rate)
    return mul(x, Tensor(keep))


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is None:
            raise ContractViolation(f"no gradient on {p.name}")
        total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients down to a shared global norm cap. Returns the
    pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad = p.grad * factor
    return norm


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, step: int = 1) -> None:
    """One bias-corrected Adam update, applied in parameter-name order.

    Moments live on the Parameter objects; `step` is the 1-based global count.
    Parameters with no populated gradient are an error.
    """
    for p in sorted(params, key=lambda p: p.name):
        if p.grad is None:
            raise ContractViolation(f"adam_step before backward: no gradient on {p.name}")
        if p.adam_m is None:
            p.adam_m = np.zeros_like(p.data)
            p.adam_v = np.zeros_like(p.data)
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * p.grad
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (p.grad * p.grad)
        mhat = p.adam_m / (1.0 - beta1 ** step)
        vhat = p.adam_v / (1.0 - beta2 ** step)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def fold_seed(*tokens) -> int:
    """Stable 64-bit hash of arbitrary tokens (ints/strings), for substreams."""
    import hashlib

    h = hashlib.blake2b(digest_size=8)
    for t in tokens:
        h.update(repr(t).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Counter-based (Philox) generator; same seed gives the same stream on
    every platform, and `split` derives independent substreams by name."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, *tokens) -> "Rng":
        return Rng(fold_seed(self.seed, *tokens))

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(size=shape, dtype=FLOAT)

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state_dict(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, d: dict) -> None:
        self.seed = int(d["seed"])
        st = self._gen.bit_generator.state
        st["state"]["counter"] = np.array(d["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(d["key"], dtype=np.uint64)
        st["buffer"] = np.array(d["buffer"], dtype=np.uint64)
        st["buffer_pos"] = d["buffer_pos"]
        st["has_uint32"] = d["has_uint32"]
        st["uinteger"] = d["uinteger"]
        self._gen.bit_generator.state = st
