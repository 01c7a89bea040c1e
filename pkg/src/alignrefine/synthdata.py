"""Deterministic synthetic corpus: acoustically confusable label pairs whose
ambiguity is resolvable from label context.

Labels come in pairs (2i-1, 2i) whose feature prototypes sit close together
relative to noise, while different pairs sit far apart. The bigram grammar
gives every label four allowed successors consisting of two whole pairs, so
acoustics plus left context cannot separate pair members reliably, but the
identity of the following pair often can. That gap is the headroom a
full-context second pass can exploit over a causal first pass.
"""

from __future__ import annotations

import base64
import functools
import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import numcore as nc
from .numcore import ContractViolation, Rng, fold_seed

FEATURE_QUANTUM = 1e-9


@dataclass(frozen=True)
class TaskSpec:
    num_labels: int = 16
    feature_dim: int = 8
    pair_offset: float = 0.25   # half the intra-pair prototype distance
    proto_scale: float = 1.0
    noise_sigma: float = 0.3
    min_duration: int = 2       # frames per label
    max_duration: int = 4
    min_length: int = 3         # labels per utterance
    max_length: int = 12
    grammar_seed: int = 2026
    train_size: int = 16384
    dev_size: int = 256
    test_size: int = 256

    def __post_init__(self):
        if self.num_labels < 4 or self.num_labels % 2:
            raise ContractViolation("num_labels must be even and >= 4")
        if self.feature_dim < self.num_labels // 2:
            raise ContractViolation("feature_dim must be >= num_labels/2 "
                                    "(one base direction per pair)")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ContractViolation("bad duration range")
        if not 1 <= self.min_length <= self.max_length:
            raise ContractViolation("bad length range")

    def pairs(self) -> list[tuple[int, int]]:
        return [(2 * i + 1, 2 * i + 2) for i in range(self.num_labels // 2)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TaskSpec":
        return cls(**json.loads(text))


@functools.lru_cache(maxsize=8)
def prototypes(spec: TaskSpec) -> np.ndarray:
    """(V+1, F) prototype vectors; row 0 (blank) is unused and zero.

    Pair i sits on base direction e_i; its two members are offset along
    e_{(i+1) mod F}, so intra-pair distance (2 * pair_offset) is far below
    any inter-pair distance."""
    protos = np.zeros((spec.num_labels + 1, spec.feature_dim))
    for i, (a, b) in enumerate(spec.pairs()):
        base = np.zeros(spec.feature_dim)
        base[i] = spec.proto_scale
        off = np.zeros(spec.feature_dim)
        off[(i + 1) % spec.feature_dim] = spec.pair_offset
        protos[a] = base + off
        protos[b] = base - off
    return protos


@functools.lru_cache(maxsize=8)
def successors(spec: TaskSpec) -> dict[int, tuple[int, ...]]:
    """Allowed followers per label: both members of two pairs other than the
    label's own pair, chosen deterministically from grammar_seed."""
    pairs = spec.pairs()
    table = {}
    for y in range(1, spec.num_labels + 1):
        own = (y - 1) // 2
        others = [i for i in range(len(pairs)) if i != own]
        r = Rng(fold_seed(spec.grammar_seed, "bigram", y))
        chosen = [others[int(i)] for i in r.permutation(len(others))[:2]]
        members = sorted(pairs[chosen[0]] + pairs[chosen[1]])
        table[y] = tuple(members)
    return table


def transition_matrix(spec: TaskSpec) -> np.ndarray:
    """(V+1, V+1) row-stochastic bigram table (row 0 unused)."""
    m = np.zeros((spec.num_labels + 1, spec.num_labels + 1))
    for y, nxt in successors(spec).items():
        for z in nxt:
            m[y, z] = 1.0 / len(nxt)
    return m


@dataclass(frozen=True)
class Utterance:
    id: str
    features: np.ndarray
    target: tuple[int, ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=nc.FLOAT))


def generate_utterance(spec: TaskSpec, split: str, index: int, master_seed: int) -> Utterance:
    """Regenerable in isolation: all draws come from a per-utterance stream
    seeded by (master_seed, split, index). Draw order is fixed: length,
    labels, durations, then one noise block."""
    seed = fold_seed(master_seed, split, index)
    r = Rng(seed)
    length = int(r.integers(spec.min_length, spec.max_length + 1))
    table = successors(spec)
    labels = [int(r.integers(1, spec.num_labels + 1))]
    for _ in range(length - 1):
        nxt = table[labels[-1]]
        labels.append(nxt[int(r.integers(0, len(nxt)))])
    durations = [int(r.integers(spec.min_duration, spec.max_duration + 1)) for _ in labels]
    protos = prototypes(spec)
    frames = np.repeat(protos[labels], durations, axis=0)
    noise = r.normal(frames.shape, scale=spec.noise_sigma) if spec.noise_sigma > 0 \
        else np.zeros(frames.shape)
    return Utterance(f"{split}-{index:05d}", frames + noise, tuple(labels), seed)


def generate_corpus(spec: TaskSpec, split: str, n: int, master_seed: int) -> list[Utterance]:
    if n < 1:
        raise ContractViolation("corpus size must be >= 1")
    return [generate_utterance(spec, split, i, master_seed) for i in range(n)]


def corpus_hash(corpus) -> str:
    """Order-sensitive 64-bit hex digest over ids, targets, and features
    quantized to a 1e-9 grid."""
    h = hashlib.blake2b(digest_size=8)
    for utt in corpus:
        h.update(utt.id.encode())
        h.update(np.asarray(utt.target, dtype="<i4").tobytes())
        q = np.round(utt.features / FEATURE_QUANTUM).astype("<i8")
        h.update(struct.pack("<ii", *utt.features.shape))
        h.update(q.tobytes())
    return h.hexdigest()


def _encode_features(features: np.ndarray) -> str:
    tp, f = features.shape
    blob = struct.pack("<ii", tp, f) + features.astype("<f8").tobytes()
    return base64.b64encode(blob).decode("ascii")


def _decode_features(text: str) -> np.ndarray:
    blob = base64.b64decode(text.encode("ascii"))
    tp, f = struct.unpack_from("<ii", blob, 0)
    data = np.frombuffer(blob, dtype="<f8", offset=8)
    if data.size != tp * f:
        raise ContractViolation(f"feature blob size {data.size} != {tp}x{f}")
    return data.reshape(tp, f).astype(nc.FLOAT)


def save_corpus(path: str, spec: TaskSpec, corpus) -> None:
    """One record per line: id, tab, space-separated target ids, tab, base64
    feature blob (int32 T' and F, then row-major float64, little-endian).
    The task description rides in a header line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#taskspec\t{spec.to_json()}\n")
        for utt in corpus:
            tgt = " ".join(str(y) for y in utt.target)
            fh.write(f"{utt.id}\t{tgt}\t{_encode_features(utt.features)}\n")


def load_corpus(path: str) -> tuple[TaskSpec, list[Utterance]]:
    spec = None
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#taskspec\t"):
                spec = TaskSpec.from_json(line.split("\t", 1)[1])
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ContractViolation(f"malformed corpus record: {line[:60]!r}")
            uid, tgt, blob = parts
            target = tuple(int(y) for y in tgt.split()) if tgt else ()
            corpus.append(Utterance(uid, _decode_features(blob), target, 0))
    if spec is None:
        raise ContractViolation("corpus file has no task header line")
    return spec, corpus
