"""Command-line front end: corpus generation, two-stage training, decoding
with an edit-marked report, evaluation, ablation grids, and the built-in
verification suites.

Exit codes: 0 success; 1 bad arguments or configuration (unknown flags,
malformed grids, task-spec mismatches); 2 runtime failures (missing files,
diverged training, unknown utterance ids, failed verification checks).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys

from . import harness as hz
from . import numcore as nc
from . import rnnt as rnnt_mod
from . import synthdata as sd
from . import verify as verify_mod
from .alignkit import Vocab, edit_distance, edit_ops, format_tokens
from .numcore import ContractViolation
from .refiner import cascade_encode, refine_decode


class _UsageError(Exception):
    """Raised in place of argparse's sys.exit(2) so bad flags exit with 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _clock(args):
    return hz.FixedClock() if getattr(args, "fixed_clock", False) else None


def _log(args):
    return (lambda s: None) if getattr(args, "quiet", False) else print


def _resolve_config(args) -> hz.ExperimentConfig:
    if args.default == (args.config is not None):
        raise ContractViolation("pass exactly one of --config FILE or --default")
    cfg = hz.default_config() if args.default else hz.load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    cfg.validate()
    return cfg


def _load_corpora(data_dir: str, splits) -> tuple[sd.TaskSpec, dict]:
    spec = None
    corpora = {}
    for split in splits:
        path = os.path.join(data_dir, f"{split}.tsv")
        got, utts = sd.load_corpus(path)
        if spec is not None and got.to_json() != spec.to_json():
            raise ContractViolation(
                f"{path} was generated from a different task spec than its siblings")
        spec = got
        corpora[split] = utts
    return spec, corpora


def _check_task(cfg: hz.ExperimentConfig, spec: sd.TaskSpec, data_dir: str) -> None:
    if cfg.task.to_json() != spec.to_json():
        raise ContractViolation(
            f"config task spec does not match the corpus in {data_dir}\n"
            f"  config: {cfg.task.to_json()}\n  corpus: {spec.to_json()}")


# ---------------------------------------------------------------------------
# Decode report
# ---------------------------------------------------------------------------


def _diff_line(ref, hyp, vocab: Vocab) -> str:
    """Edit script with inline markers; marker counts match edit_distance."""
    counts = edit_distance(ref, hyp)
    if counts.total == 0:
        return "exact match"
    parts = []
    for op, i, j in edit_ops(ref, hyp):
        if op == "=":
            parts.append(format_tokens([hyp[j]], vocab))
        elif op == "S":
            parts.append(f"[S {ref[i]}->{hyp[j]}]")
        elif op == "D":
            parts.append(f"[D {ref[i]}]")
        else:
            parts.append(f"[I {hyp[j]}]")
    return f"S={counts.subs} I={counts.ins} D={counts.dels}  " + " ".join(parts)


def decode_report(utt, best, per_step, vocab: Vocab) -> str:
    lines = [
        f"utt {utt.id}: {len(utt.features)} frames, {len(utt.target)} reference labels",
        f"ref      : {format_tokens(utt.target, vocab)}",
        f"alignment: {format_tokens(best.alignment, vocab)}",
        f"first    : {format_tokens(best.labels, vocab)}   (log score {best.log_score:.3f})",
        f"           {_diff_line(utt.target, best.labels, vocab)}",
    ]
    for k, hyp in enumerate(per_step, start=1):
        lines.append(f"step {k}   : {format_tokens(hyp, vocab)}")
        lines.append(f"           {_diff_line(utt.target, hyp, vocab)}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# WER-per-step chart (plain SVG, no plotting dependency)
# ---------------------------------------------------------------------------


def _write_wer_svg(path: str, row: hz.MetricsRow) -> None:
    values = [row.wer_first, *row.wer_steps]
    names = ["first"] + [f"step {i}" for i in range(1, len(row.wer_steps) + 1)]
    w, h, pad = 480, 280, 48
    ymax = max(10.0, math.ceil(max(values) * 1.2))
    xs = [pad + i * (w - 2 * pad) / max(1, len(values) - 1) for i in range(len(values))]
    ys = [h - pad - v * (h - 2 * pad) / ymax for v in values]
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}" font-family="monospace" font-size="11">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2:.0f}" y="18" text-anchor="middle">'
        f'{row.split} WER by refinement step</text>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        yv = ymax * frac
        yy = h - pad - yv * (h - 2 * pad) / ymax
        parts.append(f'<text x="{pad - 6}" y="{yy + 4:.1f}" text-anchor="end">{yv:.0f}</text>')
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>')
    for x, y, v, name in zip(xs, ys, values, names):
        parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="#1f77b4"/>')
        parts.append(f'<text x="{x:.1f}" y="{y - 8:.1f}" text-anchor="middle">{v:.2f}</text>')
        parts.append(f'<text x="{x:.1f}" y="{h - pad + 16}" text-anchor="middle">{name}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    if args.spec == "default":
        spec = sd.TaskSpec()
    else:
        with open(args.spec, encoding="utf-8") as fh:
            text = fh.read()
        try:
            spec = sd.TaskSpec.from_json(text)
        except (json.JSONDecodeError, TypeError) as err:
            raise ContractViolation(f"bad task spec file {args.spec}: {err}")
    os.makedirs(args.out, exist_ok=True)
    for split, n in (("train", spec.train_size), ("dev", spec.dev_size),
                     ("test", spec.test_size)):
        corpus = sd.generate_corpus(spec, split, n, args.seed)
        path = os.path.join(args.out, f"{split}.tsv")
        sd.save_corpus(path, spec, corpus)
        print(f"{split}: {n} utterances, hash {sd.corpus_hash(corpus)} -> {path}")
    return 0


def _cmd_train_first_pass(args) -> int:
    cfg = _resolve_config(args)
    spec, corpora = _load_corpora(args.data, ("train", "dev"))
    _check_task(cfg, spec, args.data)
    base = hz.train_first_pass(cfg, corpora, args.out, clock=_clock(args), log=_log(args))
    print(f"checkpoint: {base}")
    return 0


def _cmd_train_refiner(args) -> int:
    cfg = _resolve_config(args)
    spec, corpora = _load_corpora(args.data, ("train", "dev"))
    _check_task(cfg, spec, args.data)
    base = hz.train_refiner(cfg, corpora, args.first_pass, args.out,
                            clock=_clock(args), log=_log(args), tag=args.tag)
    print(f"checkpoint: {base}")
    return 0


def _cmd_decode(args) -> int:
    fp, _ = hz.load_first_pass(args.first)
    refiner = None
    if args.refiner:
        refiner, _ = hz.load_refiner(args.refiner)
    spec, corpora = _load_corpora(args.data, (args.split,))
    by_id = {u.id: u for u in corpora[args.split]}
    if args.utt not in by_id:
        print(f"error: no utterance {args.utt!r} in split {args.split!r}", file=sys.stderr)
        return 2
    utt = by_id[args.utt]
    enc0 = fp.encode_causal_np(utt.features)
    best = rnnt_mod.decode(fp, utt.features, beam_size=args.beam,
                           max_emit_per_frame=fp.config.max_emit_per_frame, enc=enc0)[0]
    per_step = []
    if refiner is not None:
        steps = args.steps or refiner.config.infer_steps
        with nc.no_grad():
            enc1 = cascade_encode(refiner, enc0)
            _, per_step = refine_decode(refiner, enc1, best.alignment, steps)
    print(decode_report(utt, best, per_step, Vocab(spec.num_labels)))
    return 0


def _cmd_evaluate(args) -> int:
    fp, _ = hz.load_first_pass(args.first)
    refiner = None
    r_steps = 0
    if args.refiner:
        refiner, _ = hz.load_refiner(args.refiner)
        r_steps = args.steps or refiner.config.infer_steps
    _, corpora = _load_corpora(args.data, (args.split,))
    row = hz.evaluate(fp, refiner, corpora[args.split], r_steps, args.beam,
                      clock=_clock(args), split=args.split)
    print(hz.metrics_header(r_steps))
    print(row.format())
    if args.out:
        hz.MetricsWriter(args.out, r_steps).write(row)
    if args.plot:
        if refiner is None:
            raise ContractViolation("--plot charts WER per refinement step; pass --refiner")
        _write_wer_svg(args.plot, row)
        print(f"plot: {args.plot}")
    return 0


def _parse_value(text: str):
    t = text.strip()
    for caster in (int, float):
        try:
            return caster(t)
        except ValueError:
            pass
    if t in ("true", "false"):
        return t == "true"
    return t


def _parse_grid(text: str) -> dict[str, list]:
    grid = {}
    for entry in filter(None, (e.strip() for e in text.split(";"))):
        key, eq, vals = entry.partition("=")
        key = key.strip()
        if not eq or not key or not vals.strip():
            raise ContractViolation(f"grid entry {entry!r} is not key=v1,v2,...")
        grid[key] = [_parse_value(v) for v in vals.split(",")]
    if not grid:
        raise ContractViolation("empty ablation grid")
    return grid


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    grid = _parse_grid(args.grid)
    spec, corpora = _load_corpora(args.data, ("train", "dev", "test"))
    _check_task(cfg, spec, args.data)
    out_csv = hz.run_ablation_grid(cfg, grid, corpora, args.first_pass, args.out,
                                   clock=_clock(args), log=_log(args))
    print(f"ablation table: {out_csv}")
    return 0


def _cmd_verify(args) -> int:
    if args.suite == "all":
        results = verify_mod.run_all(args.seed)
    else:
        try:
            results = verify_mod.run_suite(args.suite, args.seed)
        except KeyError:
            known = ", ".join(sorted(verify_mod.SUITES))
            print(f"error: unknown suite {args.suite!r} (known: {known}, all)",
                  file=sys.stderr)
            return 1
    print(verify_mod.format_report(results))
    return 0 if all(r.ok for r in results) else 2


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="alignrefine",
                description="two-pass transducer with iterative alignment refinement")
    sub = p.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("gen-data", help="generate train/dev/test corpora")
    g.add_argument("--spec", default="default", help="task spec JSON file, or 'default'")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(handler=_cmd_gen_data)

    def train_common(q):
        q.add_argument("--config", help="experiment TOML file")
        q.add_argument("--default", action="store_true", help="use the tuned default recipe")
        q.add_argument("--data", required=True, help="directory holding <split>.tsv corpora")
        q.add_argument("--out", required=True, help="output directory")
        q.add_argument("--seed", type=int, default=None, help="override config master_seed")
        q.add_argument("--fixed-clock", action="store_true",
                       help="zero wall-clock columns so output files are byte-reproducible")
        q.add_argument("--quiet", action="store_true")

    t1 = sub.add_parser("train-first-pass", help="train the streaming transducer")
    train_common(t1)
    t1.set_defaults(handler=_cmd_train_first_pass)

    t2 = sub.add_parser("train-refiner",
                        help="train the alignment refiner against a frozen first pass")
    train_common(t2)
    t2.add_argument("--first-pass", required=True, dest="first_pass",
                    help="first-pass checkpoint base path")
    t2.add_argument("--tag", default="refiner", help="checkpoint and metrics file name")
    t2.set_defaults(handler=_cmd_train_refiner)

    d = sub.add_parser("decode", help="decode one utterance and print an edit-marked report")
    d.add_argument("--first", required=True, help="first-pass checkpoint base path")
    d.add_argument("--refiner", help="refiner checkpoint base path")
    d.add_argument("--steps", type=int, default=0,
                   help="refinement steps (default: the checkpoint's setting)")
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="dev")
    d.add_argument("--utt", required=True, help="utterance id, e.g. dev-00042")
    d.add_argument("--beam", type=int, default=1)
    d.set_defaults(handler=_cmd_decode)

    e = sub.add_parser("evaluate", help="corpus WER of the first pass and each refinement step")
    e.add_argument("--first", required=True)
    e.add_argument("--refiner")
    e.add_argument("--steps", type=int, default=0)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="dev")
    e.add_argument("--beam", type=int, default=1)
    e.add_argument("--out", help="append the metrics row to this CSV")
    e.add_argument("--plot", help="write an SVG chart of WER per refinement step")
    e.add_argument("--fixed-clock", action="store_true")
    e.set_defaults(handler=_cmd_evaluate)

    a = sub.add_parser("ablate", help="train and evaluate one refiner per grid point")
    train_common(a)
    a.add_argument("--first-pass", required=True, dest="first_pass")
    a.add_argument("--grid", required=True,
                   help="dotted knobs: 'refiner.mask_prob=0,0.25;refiner.cascade_layers=0,2'")
    a.set_defaults(handler=_cmd_ablate)

    v = sub.add_parser("verify", help="run the built-in verification suites")
    v.add_argument("--suite", default="all",
                   help="one of %s, or all" % ", ".join(sorted(verify_mod.SUITES)))
    v.add_argument("--seed", type=int, default=7)
    v.set_defaults(handler=_cmd_verify)

    p.set_defaults(handler=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except SystemExit as err:  # argparse --help path
        return int(err.code or 0)
    if args.handler is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.handler(args)
    except (_UsageError, ContractViolation, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except hz.TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
