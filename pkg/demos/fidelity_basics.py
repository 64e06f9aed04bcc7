"""
How much of a channel can a few inputs explain?
===============================================

Train a small classifier, collect component similarity matrices for one
hidden layer, and compare cheap singleton scores with the best subsets
found by search.
"""

import numpy as np

from hifikit import data, fidelity, model, selection

# a 4-class problem in 12 dimensions and a two-hidden-layer MLP
source = data.blob_source(4, 12, separation=3.0, seed=0)
train = data.sample(source, 150, seed=1)
net = model.train(model.mlp(12, [32, 16], 4, seed=0), train, model.TrainConfig(epochs=20))
print("train accuracy", model.accuracy(net, train))

# %%
# One CSM per output channel of the second Dense layer (index 2). The
# total of a CSM is the channel's mean output energy.
csms = fidelity.estimate_csms(net, train.x, 2)
q = csms[0]
print("channel 0 energy", round(q.total_energy, 3), "from", q.dim, "inputs")

# %%
# Singleton fidelity ranks inputs by how much of the channel each could
# carry alone after rescaling.
s = fidelity.singleton_scores(q)
order = np.argsort(-s.s)
print("top inputs", order[:5], "scores", np.round(s.s[order[:5]], 3))

# %%
# Best subsets of growing size. For small k an exhaustive search is cheap;
# past that the random-subset search gives a lower bound.
for k in (1, 2, 3, 4, 8, 16):
    naive = selection.naive_topk(s, k, q)
    if k <= 4:
        best = selection.exhaustive_mfs(q, k)
    else:
        best = selection.monte_carlo_mfs(q, k, n_samples=500, seed=0)
    print(f"k={k:2d}  naive {naive.fidelity:.3f}  {best.method:12s} {best.fidelity:.3f}")

# %%
# A high-fidelity set: the smallest k whose best subset keeps 90% of the energy.
for k in range(1, q.dim + 1):
    found = selection.hifi_check(q, k, 0.9, method=selection.NAIVE)
    if found is not None:
        print("smallest naive (k, 0.9) set:", found.indices)
        break
