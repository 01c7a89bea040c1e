"""A guided tour of the two dynamic-programming losses.

Both losses marginalize over exponentially many alignment paths. For tiny
instances the paths can be enumerated outright, which gives an independent
check that the DP recursions and their gradients are right. This script walks
one small example of each and then cross-checks a batch of random ones.

Run: python demos/loss_oracles.py
"""

import numpy as np

from alignrefine import numcore as nc
from alignrefine.ctcloss import CtcInstance, ctc_loss, ctc_loss_oracle
from alignrefine.numcore import Parameter, Rng, Tensor
from alignrefine.oracles import fd_gradient_check, rnnt_loss_enumerate
from alignrefine.rnnt import lattice_loss


def log_softmax(x):
    return x - nc.logsumexp_np(x, axis=-1)[..., None]


print("=" * 64)
print("1. CTC on a two-frame instance")
print("=" * 64)

# Two frames, one target label "1", vocabulary {blank, 1, 2}.
# Valid paths: (1, blank), (blank, 1), (1, 1) - three ways to say "1".
rng = Rng(42)
lp = log_softmax(rng.normal(shape=(2, 3)))
target = (1,)
by_hand = np.logaddexp.reduce([
    lp[0, 1] + lp[1, 0],
    lp[0, 0] + lp[1, 1],
    lp[0, 1] + lp[1, 1],
])
loss = ctc_loss(CtcInstance(Tensor(lp), target))
print(f"paths enumerated by hand : {-by_hand:.6f}")
print(f"dynamic program          : {float(loss.data):.6f}")
print(f"enumeration oracle       : {ctc_loss_oracle(lp, target):.6f}")

print()
print("=" * 64)
print("2. RNN-T lattice with one emission")
print("=" * 64)

# T'=2 frames, target "2": emit at frame 0 or frame 1, then consume the
# remaining blanks. The lattice is (T', U+1, V+1) log-probs.
lat = log_softmax(rng.normal(shape=(2, 2, 3)))
target = (2,)
by_hand = np.logaddexp(
    lat[0, 0, 2] + lat[0, 1, 0] + lat[1, 1, 0],   # emit at frame 0
    lat[0, 0, 0] + lat[1, 0, 2] + lat[1, 1, 0],   # emit at frame 1
)
loss = lattice_loss(Tensor(lat), target)
print(f"two paths by hand        : {-by_hand:.6f}")
print(f"dynamic program          : {float(loss.data):.6f}")
print(f"enumeration oracle       : {rnnt_loss_enumerate(lat, target):.6f}")

print()
print("=" * 64)
print("3. Batch cross-check against the oracles")
print("=" * 64)

worst_ctc = worst_rnnt = 0.0
for i in range(50):
    r = Rng(1000 + i)
    T, V, U = int(r.integers(1, 7)), int(r.integers(1, 5)), int(r.integers(0, 4))
    tgt = tuple(int(x) for x in r.integers(1, V + 1, shape=U))
    lp = log_softmax(r.normal(shape=(T, V + 1)))
    got = float(ctc_loss(CtcInstance(Tensor(lp), tgt)).data)
    want = ctc_loss_oracle(lp, tgt)
    if np.isfinite(got) or np.isfinite(want):
        worst_ctc = max(worst_ctc, abs(got - want))

    Tp = int(r.integers(1, 5))
    lat = log_softmax(r.normal(shape=(Tp, U + 1, V + 1)))
    got = float(lattice_loss(Tensor(lat), tgt).data)
    worst_rnnt = max(worst_rnnt, abs(got - rnnt_loss_enumerate(lat, tgt)))

print(f"worst CTC   |dp - oracle| over 50 instances: {worst_ctc:.2e}")
print(f"worst RNN-T |dp - oracle| over 50 instances: {worst_rnnt:.2e}")

print()
print("=" * 64)
print("4. Gradients against central finite differences")
print("=" * 64)

r = Rng(7)
theta = Parameter("theta", r.normal(shape=(4, 4)))
target = (1, 2)


def loss_fn():
    return float(ctc_loss(CtcInstance(nc.log_softmax_rows(theta), target)).data)


loss = ctc_loss(CtcInstance(nc.log_softmax_rows(theta), target))
nc.backward(loss, [theta])
rel = fd_gradient_check(loss_fn, [theta], picks_per_param=8, rng=r)
print(f"ctc_loss worst relative gradient error: {rel:.2e}")
print("the tape and the finite differences tell the same story")
