"""Experiment plumbing: config files, training loops for both passes,
evaluation across refinement steps, checkpoints, metrics CSVs, and the
ablation grid runner.

Determinism: every random draw in a run derives from the master seed through
named substreams, evaluation reduces per-utterance results in index order
even when AR_THREADS parallelizes the map, and wall-clock timing goes through
an injectable clock so runs can be made bit-reproducible.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
import os
import time
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import numcore as nc
from . import rnnt as rnnt_mod
from .alignkit import EditCounts, edit_distance
from .ctcloss import is_feasible
from .numcore import ContractViolation, Parameter, Rng, fold_seed
from .refiner import (RefineConfig, SecondPassModel, SkipSample, cascade_encode,
                      refine_decode, refine_train_loss)
from .rnnt import FirstPassConfig, FirstPassModel, spec_augment
from .synthdata import TaskSpec

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

CHECKPOINT_MAGIC = "alignrefine-checkpoint v1"


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; training aborts rather than continuing blind."""


# ---------------------------------------------------------------------------
# Clocks
# ---------------------------------------------------------------------------


class SystemClock:
    def now(self) -> float:
        return time.monotonic()


class FixedClock:
    """Constant clock: wall-time columns become 0.0, making output files
    byte-reproducible across runs."""

    def __init__(self, value: float = 0.0):
        self.value = value

    def now(self) -> float:
        return self.value


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    max_steps: int = 3000
    eval_interval: int = 100
    patience: int = 10       # evals without dev-loss improvement before stopping
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    warmup_steps: int = 100
    decay_from: int = 0      # linear decay lr -> lr_end over [decay_from, max_steps]; 0 = off
    lr_end: float = 1e-4
    beam_size: int = 1
    spec_augment: bool = False

    def validate(self, where: str) -> None:
        if self.beam_size not in (1, 4):
            raise ContractViolation(f"{where}.beam_size must be 1 or 4, got {self.beam_size}")
        for key in ("batch_size", "max_steps", "eval_interval", "patience", "warmup_steps"):
            if getattr(self, key) < 1:
                raise ContractViolation(f"{where}.{key} must be >= 1")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ContractViolation(f"{where}.lr and {where}.clip_norm must be positive")
        if self.decay_from < 0 or (self.decay_from and self.decay_from >= self.max_steps):
            raise ContractViolation(f"{where}.decay_from must lie inside [0, max_steps)")
        if not 0.0 < self.lr_end <= self.lr:
            raise ContractViolation(f"{where}.lr_end must be in (0, lr]")

    def lr_at(self, step: int) -> float:
        lr = self.lr * min(1.0, step / self.warmup_steps)
        if 0 < self.decay_from < step:
            frac = (step - self.decay_from) / (self.max_steps - self.decay_from)
            lr = self.lr * (1.0 - frac) + self.lr_end * frac
        return lr


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int
    task: TaskSpec
    first_pass: FirstPassConfig
    refiner: RefineConfig
    train_first_pass: TrainConfig
    train_refiner: TrainConfig

    def validate(self) -> None:
        self.train_first_pass.validate("train_first_pass")
        self.train_refiner.validate("train_refiner")
        if self.first_pass.num_labels != self.task.num_labels:
            raise ContractViolation("first_pass.num_labels must match task.num_labels")
        if self.refiner.num_labels != self.task.num_labels:
            raise ContractViolation("refiner.num_labels must match task.num_labels")
        if self.refiner.input_dim != self.first_pass.dim:
            raise ContractViolation("refiner.input_dim must match first_pass.dim")


_SECTION_TYPES = {
    "task": TaskSpec,
    "first_pass": FirstPassConfig,
    "refiner": RefineConfig,
    "train_first_pass": TrainConfig,
    "train_refiner": TrainConfig,
}
# fields the loader derives from other sections rather than reading
_DERIVED_FIELDS = {
    "first_pass": ("num_labels", "feature_dim"),
    "refiner": ("num_labels", "input_dim"),
}


def make_experiment_config(master_seed: int = 7, **section_kwargs) -> ExperimentConfig:
    """Build a fully resolved config from per-section keyword dicts
    (task=..., first_pass=..., refiner=..., train_first_pass=...,
    train_refiner=...). Derived fields are filled in automatically."""
    for key in section_kwargs:
        if key not in _SECTION_TYPES:
            raise ContractViolation(f"unknown config section {key!r}")
    task = TaskSpec(**section_kwargs.get("task", {}))
    fp_kw = dict(section_kwargs.get("first_pass", {}))
    for bad in _DERIVED_FIELDS["first_pass"]:
        if bad in fp_kw:
            raise ContractViolation(f"first_pass.{bad} is derived from [task]; do not set it")
    first_pass = FirstPassConfig(num_labels=task.num_labels, feature_dim=task.feature_dim, **fp_kw)
    rf_kw = dict(section_kwargs.get("refiner", {}))
    for bad in _DERIVED_FIELDS["refiner"]:
        if bad in rf_kw:
            raise ContractViolation(f"refiner.{bad} is derived; do not set it")
    refiner = RefineConfig(num_labels=task.num_labels, input_dim=first_pass.dim, **rf_kw)
    tfp = TrainConfig(**section_kwargs.get("train_first_pass", {}))
    trf_defaults = {"spec_augment": True, "max_steps": 1500, "eval_interval": 75}
    trf_kw = {**trf_defaults, **section_kwargs.get("train_refiner", {})}
    trf = TrainConfig(**trf_kw)
    cfg = ExperimentConfig(master_seed, task, first_pass, refiner, tfp, trf)
    cfg.validate()
    return cfg


def default_config(master_seed: int = 7) -> ExperimentConfig:
    """The tuned end-to-end recipe; TOML files omit-to-dataclass-defaults
    instead, so an empty file is not the same thing as --default."""
    return make_experiment_config(
        master_seed,
        train_first_pass=dict(max_steps=12000, eval_interval=1000,
                              decay_from=6000),
        train_refiner=dict(max_steps=4000, eval_interval=250),
    )


def load_config(path: str) -> ExperimentConfig:
    """Read a TOML experiment file. Unknown sections or keys are errors, and
    every field not present falls back to the documented default."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    master_seed = data.pop("master_seed", 7)
    if not isinstance(master_seed, int):
        raise ContractViolation("master_seed must be an integer")
    sections = {}
    for name, body in data.items():
        if name not in _SECTION_TYPES:
            raise ContractViolation(f"unknown config section [{name}]")
        if not isinstance(body, dict):
            raise ContractViolation(f"config key {name} must be a section")
        allowed = {f.name for f in dataclasses.fields(_SECTION_TYPES[name])}
        allowed -= set(_DERIVED_FIELDS.get(name, ()))
        for key in body:
            if key not in allowed:
                raise ContractViolation(f"unknown config key {name}.{key}")
        sections[name] = body
    return make_experiment_config(master_seed, **sections)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "master_seed": cfg.master_seed,
        "task": dataclasses.asdict(cfg.task),
        "first_pass": dataclasses.asdict(cfg.first_pass),
        "refiner": dataclasses.asdict(cfg.refiner),
        "train_first_pass": dataclasses.asdict(cfg.train_first_pass),
        "train_refiner": dataclasses.asdict(cfg.train_refiner),
    }


def config_from_dict(d: dict) -> ExperimentConfig:
    cfg = ExperimentConfig(
        master_seed=d["master_seed"],
        task=TaskSpec(**d["task"]),
        first_pass=FirstPassConfig(**d["first_pass"]),
        refiner=RefineConfig(**d["refiner"]),
        train_first_pass=TrainConfig(**d["train_first_pass"]),
        train_refiner=TrainConfig(**d["train_refiner"]),
    )
    cfg.validate()
    return cfg


def describe_config(cfg: ExperimentConfig) -> str:
    """Every resolved value, one `section.key = value` line per field, so a
    run's log shows the complete effective configuration."""
    lines = [f"master_seed = {cfg.master_seed}"]
    for section, body in config_to_dict(cfg).items():
        if section == "master_seed":
            continue
        for key, value in body.items():
            lines.append(f"{section}.{key} = {value}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def metrics_header(r_steps: int) -> str:
    cols = ["step", "split", "loss", "wer_first"]
    cols += [f"wer_step{i}" for i in range(1, r_steps + 1)]
    cols += ["skips", "wall_s"]
    return ",".join(cols)


@dataclass
class MetricsRow:
    step: int
    split: str
    loss: float
    wer_first: float
    wer_steps: tuple[float, ...]
    skips: int
    wall_s: float

    def format(self) -> str:
        vals = [str(self.step), self.split, repr(float(self.loss)), repr(float(self.wer_first))]
        vals += [repr(float(w)) for w in self.wer_steps]
        vals += [str(self.skips), repr(float(self.wall_s))]
        return ",".join(vals)


class MetricsWriter:
    """Append-mode CSV with the stable golden header; flushes per row so a
    killed run leaves usable output."""

    def __init__(self, path: str, r_steps: int):
        self.path = path
        self.r_steps = r_steps
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(metrics_header(r_steps) + "\n")

    def write(self, row: MetricsRow) -> None:
        if len(row.wer_steps) != self.r_steps:
            raise ContractViolation(
                f"row has {len(row.wer_steps)} step columns, file wants {self.r_steps}")
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(row.format() + "\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def params_hash(params: dict[str, Parameter]) -> str:
    import hashlib

    h = hashlib.blake2b(digest_size=16)
    for name in sorted(params):
        p = params[name]
        h.update(name.encode())
        h.update(repr(tuple(p.data.shape)).encode())
        h.update(p.data.astype("<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(base: str, params: dict[str, Parameter], config_dict: dict,
                    rng_state: dict) -> None:
    """Write `<base>.manifest` (text: config echo, rng state, per-parameter
    name/shape/offset) and `<base>.bin` (raw little-endian float64)."""
    names = sorted(params)
    lines = [CHECKPOINT_MAGIC,
             "config\t" + json.dumps(config_dict, sort_keys=True),
             "rng\t" + json.dumps(rng_state, sort_keys=True)]
    offset = 0
    blobs = []
    for name in names:
        data = params[name].data
        shape = ",".join(str(s) for s in data.shape)
        lines.append(f"param\t{name}\t{shape}\t{offset}\t{data.size}")
        blobs.append(data.astype("<f8").tobytes())
        offset += data.size
    with open(base + ".manifest", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(base + ".bin", "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(base: str) -> tuple[dict[str, np.ndarray], dict, dict]:
    with open(base + ".manifest", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{base}.manifest is not a checkpoint manifest")
    blob = np.fromfile(base + ".bin", dtype="<f8")
    config_dict = rng_state = None
    arrays: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        if not line:
            continue
        kind, _, rest = line.partition("\t")
        if kind == "config":
            config_dict = json.loads(rest)
        elif kind == "rng":
            rng_state = json.loads(rest)
        elif kind == "param":
            name, shape_s, offset_s, count_s = rest.split("\t")
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            offset, count = int(offset_s), int(count_s)
            arrays[name] = blob[offset:offset + count].reshape(shape).copy()
        else:
            raise ContractViolation(f"unknown manifest line kind {kind!r}")
    if config_dict is None or rng_state is None:
        raise ContractViolation(f"{base}.manifest missing config or rng line")
    return arrays, config_dict, rng_state


def restore_params(params: dict[str, Parameter], arrays: dict[str, np.ndarray]) -> None:
    if set(params) != set(arrays):
        missing = set(params) ^ set(arrays)
        raise ContractViolation(f"checkpoint parameter names mismatch: {sorted(missing)[:4]}")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise ContractViolation(f"shape mismatch for {name}")
        p.data = arrays[name].copy()


def load_first_pass(base: str) -> tuple[FirstPassModel, dict]:
    arrays, cfg_dict, _ = load_checkpoint(base)
    model = FirstPassModel(FirstPassConfig(**cfg_dict["first_pass"]), Rng(0))
    restore_params(model.params, arrays)
    return model, cfg_dict


def load_refiner(base: str) -> tuple[SecondPassModel, dict]:
    arrays, cfg_dict, _ = load_checkpoint(base)
    model = SecondPassModel(RefineConfig(**cfg_dict["refiner"]), Rng(0))
    restore_params(model.params, arrays)
    return model, cfg_dict


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def parallel_map(fn, items):
    """Map preserving input order; AR_THREADS > 1 enables a thread pool but
    the reduction order never changes."""
    workers = int(os.environ.get("AR_THREADS", "1"))
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def evaluate(first_pass: FirstPassModel, refiner: SecondPassModel | None, corpus,
             r_steps: int, beam: int, clock=None, step: int = 0, split: str = "eval",
             loss: float = float("nan")) -> MetricsRow:
    """Corpus WER of the first pass and after each refinement step.

    Pure and deterministic for fixed models and corpus. The skips column
    counts utterances whose first-pass alignment is too short to ever emit
    the reference (the refiner cannot fully fix those).
    """
    clock = clock or SystemClock()
    t0 = clock.now()
    cap = first_pass.config.max_emit_per_frame

    def one(utt):
        enc0 = first_pass.encode_causal_np(utt.features)
        hyp = rnnt_mod.decode(first_pass, utt.features, beam_size=beam,
                              max_emit_per_frame=cap, enc=enc0)[0]
        first = edit_distance(utt.target, hyp.labels)
        step_counts: list[EditCounts] = []
        skip = 0
        if refiner is not None:
            with nc.no_grad():
                enc1 = cascade_encode(refiner, enc0)
            if not is_feasible(len(hyp.alignment), utt.target):
                skip = 1
            _, per_step = refine_decode(refiner, enc1, hyp.alignment, r_steps)
            step_counts = [edit_distance(utt.target, h) for h in per_step]
        return first, step_counts, skip, len(utt.target)

    results = parallel_map(one, corpus)
    ref_total = sum(r[3] for r in results)
    denom = max(1, ref_total)
    wer_first = 100.0 * sum(r[0].total for r in results) / denom
    wer_steps = tuple(
        100.0 * sum(r[1][i].total for r in results) / denom
        for i in range(r_steps if refiner is not None else 0)
    )
    skips = sum(r[2] for r in results)
    return MetricsRow(step, split, loss, wer_first, wer_steps, skips, clock.now() - t0)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _batch_indices(rng: Rng, n: int, batch_size: int) -> list[int]:
    return [int(i) for i in rng.integers(0, n, shape=batch_size)]


def train_first_pass(cfg: ExperimentConfig, corpora: dict, out_dir: str,
                     clock=None, log=None) -> str:
    """Optimize the transducer loss with Adam (warmup + global-norm clip),
    early-stopping on dev loss; returns the checkpoint base path holding the
    best-dev parameters."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    clock = clock or SystemClock()
    log = log or (lambda s: None)
    tc = cfg.train_first_pass
    train, dev = corpora["train"], corpora["dev"]
    rng = Rng(fold_seed(cfg.master_seed, "first_pass"))
    model = FirstPassModel(cfg.first_pass, rng.split("init"))
    params = list(model.params.values())
    writer = MetricsWriter(os.path.join(out_dir, "first_pass_metrics.csv"), r_steps=0)
    t0 = clock.now()

    best_loss, best_arrays, bad_evals = math.inf, None, 0
    for step in range(1, tc.max_steps + 1):
        batch = _batch_indices(rng.split("batch", step), len(train), tc.batch_size)
        losses = []
        for i in batch:
            utt = train[i]
            feats = utt.features
            if tc.spec_augment:
                feats = spec_augment(feats, rng.split("specaug", step, i))
            losses.append(model.loss(feats, utt.target))
        loss = nc.mean_of(losses)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"first-pass loss {loss.data} at step {step}")
        nc.backward(loss, params)
        nc.clip_gradients(params, tc.clip_norm)
        nc.adam_step(params, tc.lr_at(step), tc.beta1, tc.beta2, tc.eps, step)

        if step % tc.eval_interval == 0 or step == tc.max_steps:
            with nc.no_grad():
                dev_loss = float(np.mean([model.loss(u.features, u.target).data for u in dev]))
            row = evaluate(model, None, dev, 0, tc.beam_size, clock=FixedClock())
            writer.write(MetricsRow(step, "dev", dev_loss, row.wer_first, (), 0,
                                    clock.now() - t0))
            log(f"first-pass step {step}: train_loss {float(loss.data):.4f} "
                f"dev_loss {dev_loss:.4f} dev_wer {row.wer_first:.2f}")
            if dev_loss < best_loss:
                best_loss = dev_loss
                best_arrays = {n: p.data.copy() for n, p in model.params.items()}
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= tc.patience:
                    log(f"first-pass early stop at step {step}")
                    break

    if best_arrays is not None:
        restore_params(model.params, best_arrays)
    base = os.path.join(out_dir, "first_pass")
    save_checkpoint(base, model.params, config_to_dict(cfg), rng.state_dict())
    return base


def train_refiner(cfg: ExperimentConfig, corpora: dict, first_pass_base: str,
                  out_dir: str, clock=None, log=None, tag: str = "refiner") -> str:
    """Train the second pass against a frozen first pass.

    Per batch: spec-augment features, first-pass beam decode for the top-1
    alignment, then the averaged per-step CTC objective. The first-pass
    parameter hash is asserted unchanged afterward.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    clock = clock or SystemClock()
    log = log or (lambda s: None)
    tc = cfg.train_refiner
    train, dev = corpora["train"], corpora["dev"]

    fp_model, _ = load_first_pass(first_pass_base)
    fp_hash = params_hash(fp_model.params)
    cap = fp_model.config.max_emit_per_frame

    rcfg = cfg.refiner
    rng = Rng(fold_seed(cfg.master_seed, "refiner", tag))
    model = SecondPassModel(rcfg, rng.split("init"))
    params = list(model.params.values())  # first-pass params excluded: frozen
    writer = MetricsWriter(os.path.join(out_dir, f"{tag}_metrics.csv"), rcfg.infer_steps)
    t0 = clock.now()

    # the first pass is frozen, so dev encodings and alignments never change;
    # decode the dev set once up front instead of inside every eval
    dev_cache = []
    with nc.no_grad():
        for utt in dev:
            enc0 = fp_model.encode_causal_np(utt.features)
            hyp = rnnt_mod.decode(fp_model, utt.features, beam_size=tc.beam_size,
                                  max_emit_per_frame=cap, enc=enc0)[0]
            dev_cache.append((enc0, hyp.alignment, hyp.labels))
    ref_total = max(1, sum(len(u.target) for u in dev))
    wer_first = 100.0 * sum(edit_distance(u.target, labels).total
                            for u, (_, _, labels) in zip(dev, dev_cache)) / ref_total

    def dev_loss_value():
        # fixed per-utterance mask streams keep successive evals comparable
        total, count, skipped = 0.0, 0, 0
        with nc.no_grad():
            for j, (utt, (enc0, a0, _)) in enumerate(zip(dev, dev_cache)):
                enc1 = cascade_encode(model, enc0)
                try:
                    l = refine_train_loss(model, enc1, a0, utt.target, rcfg.train_steps,
                                          rcfg.mask_prob, rng.split("devloss", j))
                except SkipSample:
                    skipped += 1
                    continue
                total += float(l.data)
                count += 1
        return (total / max(1, count)), skipped

    def dev_wer_steps():
        edits = [0] * rcfg.infer_steps
        with nc.no_grad():
            for utt, (enc0, a0, _) in zip(dev, dev_cache):
                enc1 = cascade_encode(model, enc0)
                _, per_step = refine_decode(model, enc1, a0, rcfg.infer_steps)
                for k, h in enumerate(per_step):
                    edits[k] += edit_distance(utt.target, h).total
        return tuple(100.0 * e / ref_total for e in edits)

    best_loss, best_arrays, bad_evals = math.inf, None, 0
    updates = 0
    for step in range(1, tc.max_steps + 1):
        batch = _batch_indices(rng.split("batch", step), len(train), tc.batch_size)
        losses = []
        skips = 0
        for i in batch:
            utt = train[i]
            feats = utt.features
            if tc.spec_augment:
                feats = spec_augment(feats, rng.split("specaug", step, i))
            enc0 = fp_model.encode_causal_np(feats)
            a0 = rnnt_mod.decode(fp_model, feats, beam_size=tc.beam_size,
                                 max_emit_per_frame=cap, enc=enc0)[0].alignment
            enc1 = cascade_encode(model, enc0)
            try:
                losses.append(refine_train_loss(model, enc1, a0, utt.target,
                                                rcfg.train_steps, rcfg.mask_prob,
                                                rng.split("aug", step, i)))
            except SkipSample:
                skips += 1
        if not losses:
            continue
        loss = nc.mean_of(losses)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"refiner loss {loss.data} at step {step}")
        nc.backward(loss, params)
        nc.clip_gradients(params, tc.clip_norm)
        updates += 1
        nc.adam_step(params, tc.lr_at(updates), tc.beta1, tc.beta2, tc.eps, updates)

        if step % tc.eval_interval == 0 or step == tc.max_steps:
            dl, dev_skips = dev_loss_value()
            wer_steps = dev_wer_steps()
            writer.write(MetricsRow(step, "dev", dl, wer_first, wer_steps,
                                    dev_skips, clock.now() - t0))
            log(f"{tag} step {step}: train_loss {float(loss.data):.4f} dev_loss {dl:.4f} "
                f"dev_wer_first {wer_first:.2f} dev_wer_steps "
                + " ".join(f"{w:.2f}" for w in wer_steps))
            if dl < best_loss:
                best_loss, best_arrays, bad_evals = dl, {n: p.data.copy()
                                                         for n, p in model.params.items()}, 0
            else:
                bad_evals += 1
                if bad_evals >= tc.patience:
                    log(f"{tag} early stop at step {step}")
                    break

    if best_arrays is not None:
        restore_params(model.params, best_arrays)
    if params_hash(fp_model.params) != fp_hash:
        raise ContractViolation("first-pass parameters changed during refiner training")
    base = os.path.join(out_dir, tag)
    save_checkpoint(base, model.params, config_to_dict(cfg), rng.state_dict())
    return base


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------


def _apply_knob(cfg: ExperimentConfig, path: str, value) -> ExperimentConfig:
    section, _, key = path.partition(".")
    if section not in _SECTION_TYPES or not key:
        raise ContractViolation(f"unknown grid knob {path!r}")
    body = getattr(cfg, section)
    if key not in {f.name for f in dataclasses.fields(body)}:
        raise ContractViolation(f"unknown grid knob {path!r}")
    return dataclasses.replace(cfg, **{section: dataclasses.replace(body, **{key: value})})


def config_id_for(knobs: dict) -> str:
    return ";".join(f"{k}={knobs[k]}" for k in sorted(knobs))


def run_ablation_grid(cfg: ExperimentConfig, grid: dict[str, list], corpora: dict,
                      first_pass_base: str, out_dir: str, clock=None, log=None,
                      eval_split: str = "test") -> str:
    """Train and evaluate one refiner per point of the cartesian product of
    the grid's knob lists (dotted config paths -> value lists). One CSV row
    per config; reruns skip rows whose config_id already appears in the
    output file."""
    os.makedirs(out_dir, exist_ok=True)
    log = log or (lambda s: None)
    out_csv = os.path.join(out_dir, "ablation.csv")
    r_steps = cfg.refiner.infer_steps
    header = "config_id," + metrics_header(r_steps)

    done = set()
    if os.path.exists(out_csv) and os.path.getsize(out_csv) > 0:
        with open(out_csv, encoding="utf-8") as fh:
            first = fh.readline().rstrip("\n")
            if first != header:
                raise ContractViolation(f"{out_csv} header does not match this grid's schema")
            for line in fh:
                if line.strip():
                    done.add(line.split(",", 1)[0])
    else:
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")

    names = sorted(grid)
    for combo in itertools.product(*(grid[n] for n in names)):
        knobs = dict(zip(names, combo))
        cid = config_id_for(knobs)
        if cid in done:
            log(f"ablation {cid}: already complete, skipping")
            continue
        point = cfg
        for path, value in knobs.items():
            point = _apply_knob(point, path, value)
        point.validate()
        if point.refiner.infer_steps != r_steps:
            raise ContractViolation("grid must not vary refiner.infer_steps "
                                    "(metrics columns are fixed per file)")
        tag = "ablate-" + cid.replace(";", "_").replace("=", "-").replace(".", "p")
        log(f"ablation {cid}: training")
        ck = train_refiner(point, corpora, first_pass_base, out_dir,
                           clock=clock, log=log, tag=tag)
        refiner, _ = load_refiner(ck)
        fp_model, _ = load_first_pass(first_pass_base)
        row = evaluate(fp_model, refiner, corpora[eval_split], r_steps,
                       point.train_refiner.beam_size, clock=clock,
                       step=0, split=eval_split)
        with open(out_csv, "a", encoding="utf-8") as fh:
            fh.write(cid + "," + row.format() + "\n")
        log(f"ablation {cid}: wer_first {row.wer_first:.2f} steps "
            + " ".join(f"{w:.2f}" for w in row.wer_steps))
    return out_csv
