"""End-to-end walkthrough on a scaled-down task.

Generates a small confusable-pair corpus, trains a streaming first pass and
an alignment refiner on top of it, then shows what refinement actually does
to individual hypotheses. Everything is seeded, so reruns print the same
numbers. Takes a few minutes on one core.

Run: python3 demos/refinement_walkthrough.py
"""

import tempfile

from alignrefine import harness as hz
from alignrefine import numcore as nc
from alignrefine import rnnt
from alignrefine import synthdata as sd
from alignrefine.alignkit import Vocab, edit_distance
from alignrefine.cli import decode_report
from alignrefine.refiner import cascade_encode, refine_decode

SEED = 11

cfg = hz.make_experiment_config(
    SEED,
    task=dict(num_labels=6, feature_dim=4, max_length=6,
              train_size=1024, dev_size=48, test_size=48),
    first_pass=dict(layers=2, dim=32, heads=2, ffn_mult=2),
    refiner=dict(layers=2, dim=32, heads=2, ffn_mult=2),
    train_first_pass=dict(max_steps=1500, eval_interval=300),
    train_refiner=dict(max_steps=600, eval_interval=150, batch_size=4),
)

print("=" * 64)
print("1. The task")
print("=" * 64)
corpora = {s: sd.generate_corpus(cfg.task, s, getattr(cfg.task, f"{s}_size"), SEED)
           for s in ("train", "dev")}
vocab = Vocab(cfg.task.num_labels)
utt = corpora["dev"][0]
print(f"labels come in confusable pairs: {cfg.task.pairs()}")
print(f"sample utterance {utt.id}: target {utt.target}, "
      f"{utt.features.shape[0]} frames of dim {utt.features.shape[1]}")
print(f"train/dev sizes: {len(corpora['train'])}/{len(corpora['dev'])}")

print()
print("=" * 64)
print("2. Train the streaming first pass")
print("=" * 64)
work = tempfile.mkdtemp(prefix="walkthrough-")
fp_base = hz.train_first_pass(cfg, corpora, work, log=lambda s: print("  " + s))
first_pass, _ = hz.load_first_pass(fp_base)

print()
print("=" * 64)
print("3. Train the refiner on frozen first-pass alignments")
print("=" * 64)
ref_base = hz.train_refiner(cfg, corpora, fp_base, work,
                            log=lambda s: print("  " + s))
refiner, _ = hz.load_refiner(ref_base)

print()
print("=" * 64)
print("4. Dev WER: first pass, then each refinement step")
print("=" * 64)
row = hz.evaluate(first_pass, refiner, corpora["dev"],
                  cfg.refiner.infer_steps, beam=1)
print(f"first pass        : {row.wer_first:.2f}")
for k, w in enumerate(row.wer_steps, 1):
    print(f"refinement step {k} : {w:.2f}")

print()
print("=" * 64)
print("5. What refinement does to individual utterances")
print("=" * 64)
cap = first_pass.config.max_emit_per_frame
shown = 0
for utt in corpora["dev"]:
    enc0 = first_pass.encode_causal_np(utt.features)
    best = rnnt.decode(first_pass, utt.features, beam_size=1,
                       max_emit_per_frame=cap, enc=enc0)[0]
    with nc.no_grad():
        enc1 = cascade_encode(refiner, enc0)
    _, per_step = refine_decode(refiner, enc1, best.alignment,
                                cfg.refiner.infer_steps)
    before = edit_distance(utt.target, best.labels).total
    after = edit_distance(utt.target, per_step[-1]).total
    if before > after:
        print(decode_report(utt, best, per_step, vocab))
        print()
        shown += 1
    if shown == 3:
        break
if not shown:
    print("(no dev utterance improved; try more training steps)")
