"""Why the synthetic task is hard, and how alignments are manipulated.

The corpus generator builds labels in pairs that share a base direction in
feature space, separated by +/- pair_offset along it. Under noise those are
the natural confusions, which is exactly the error class a refiner that sees
acoustics plus a draft alignment can fix. This script prints the geometry,
the bigram grammar, and the collapse/expand/mask plumbing the refiner uses.

Run: python3 demos/task_and_alignments.py
"""

import numpy as np

from alignrefine import synthdata as sd
from alignrefine.alignkit import Vocab, collapse, expand, mask_augment
from alignrefine.numcore import Rng, fold_seed

spec = sd.TaskSpec(num_labels=6, feature_dim=4, max_length=5)
vocab = Vocab(spec.num_labels)

print("=" * 64)
print("1. Prototype geometry")
print("=" * 64)
protos = sd.prototypes(spec)
print("label prototypes (row 0 is blank/silence):")
for i, row in enumerate(protos):
    print(f"  {i}: " + " ".join(f"{v:+.3f}" for v in row))
for a, b in spec.pairs():
    intra = np.linalg.norm(protos[a] - protos[b])
    print(f"pair ({a},{b}) distance {intra:.3f}  vs noise sigma {spec.noise_sigma}")

print()
print("=" * 64)
print("2. Bigram grammar")
print("=" * 64)
print("each label allows 4 successors, never its own pair partner:")
for lab, nxt in sd.successors(spec).items():
    print(f"  {lab} -> {nxt}")

print()
print("=" * 64)
print("3. One utterance under noise")
print("=" * 64)
utt = sd.generate_utterance(spec, "dev", 3, master_seed=7)
print(f"{utt.id}: target {utt.target}, {len(utt.features)} frames")
# nearest-prototype readout of the noisy features
nearest = [int(np.argmin(np.linalg.norm(protos - f, axis=1)))
           for f in utt.features]
print(f"nearest-prototype frame labels: {tuple(nearest)}")
print(f"collapsed                     : {collapse(nearest, vocab)}")
print("confusions survive collapsing; the grammar is what disambiguates")

print()
print("=" * 64)
print("4. Alignments: collapse, expand, mask")
print("=" * 64)
alignment = (0, 1, 1, 0, 0, 4, 4, 4, 3, 0)
labels = collapse(alignment, vocab)
print(f"alignment {alignment}")
print(f"collapses to {labels}")
rebuilt = expand((1, 4, 3), repeats=(2, 3, 1), blank_runs=(1, 2, 0, 1))
print(f"expand((1,4,3), repeats=(2,3,1), blank_runs=(1,2,0,1)) = {rebuilt}")
assert rebuilt == alignment

rng = Rng(fold_seed(7, "demo-mask"))
for p in (0.0, 0.1, 0.5):
    masked = mask_augment(alignment, p, rng, vocab)
    marks = " ".join("M" if m == vocab.mask_id else str(m) for m in masked)
    print(f"mask_augment p={p:<4}: {marks}")
print("masked slots force the refiner to lean on acoustics, not the draft")
