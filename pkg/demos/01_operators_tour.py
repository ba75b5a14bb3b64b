# coding: utf-8

# # A tour of the adapter operators
#
# Every policy in a population is a frozen base plus a low-rank correction
# B @ A.  Evolution never touches the base; it only produces new (A, B)
# pairs from one or two parents.  This script builds two small random
# adapters and pushes them through every operator, printing how far the
# child's effective delta lands from each parent.

import numpy as np

from selfplay_lora import tensor as T
from selfplay_lora.operators import ALL_OPERATORS, DEFAULT_PARAMS, LIVE_OPERATORS, apply_operator, arity


# Two parents with one slot each.  A is r x d_in and B is d_out x r, so the
# delta they encode is 12 x 16 of rank at most 4.

g = np.random.default_rng(0)


def random_adapter():
    pair = T.FactorPair(g.standard_normal((4, 16)), g.standard_normal((12, 4)))
    return T.AdapterState({"w": pair}, scaling=1.0)


p1, p2 = random_adapter(), random_adapter()
d1 = T.effective_delta(p1.slots["w"])
d2 = T.effective_delta(p2.slots["w"])
print("parent deltas:", d1.shape, "norms %.2f %.2f" % (np.linalg.norm(d1), np.linalg.norm(d2)))


# The SVD of the delta is computed from the factors without ever forming
# a d_out x d_in matrix in the inner loop.

t = T.svd_of_delta(p1.slots["w"])
print("singular values of parent 1:", np.round(t.S, 3))
print("reconstruction error: %.2e" % np.abs(t.U @ np.diag(t.S) @ t.V.T - d1).max())


# Now every operator.  The seed is what makes a stochastic child
# reproducible: same parents, same seed, same bytes.

print()
print("%-18s %5s %10s %10s" % ("operator", "live", "|c-p1|", "|c-p2|"))
for op in ALL_OPERATORS:
    parents = [p1, p2] if arity(op) == 2 else [p1]
    child = apply_operator(op, parents, DEFAULT_PARAMS, seed=7)
    dc = T.effective_delta(child.slots["w"])
    print("%-18s %5s %10.3f %10.3f" % (op, "yes" if op in LIVE_OPERATORS else "",
                                       np.linalg.norm(dc - d1), np.linalg.norm(dc - d2)))


# copy_parent sits at distance zero from parent 1 and the mutations stay
# close to it.  Crossovers land between the two parents.  DARE is unbiased
# in each factor but not in the product; averaging many children shows it.

means = np.zeros_like(d1)
for s in range(2000):
    means += T.effective_delta(apply_operator("x1_dare", [p1, p2], DEFAULT_PARAMS, seed=s).slots["w"])
means /= 2000
naive = T.effective_delta(apply_operator("x5_linear", [p1, p2], DEFAULT_PARAMS, seed=0).slots["w"])
print()
print("mean DARE delta vs product of averaged factors: %.3f" % np.linalg.norm(means - naive))
print("mean DARE delta vs average of parent deltas:    %.3f" % np.linalg.norm(means - (d1 + d2) / 2))
