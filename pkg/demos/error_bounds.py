"""
From a layer's error to the network's error
===========================================

Masking inputs of one layer changes the logits by at most a Lipschitz
constant times the layer's masked energy. Check it, and see how loose the
worst case is.
"""

import numpy as np

from hifikit import analysis, data, model

source = data.pattern_source(3, (4, 8), seed=0)
train = data.sample(source, 60, seed=1)
test = data.sample(source, 60, seed=2)
net = model.train(model.ffn_classifier(4, 8, 16, 3, blocks=2, seed=0), train, model.TrainConfig(epochs=10))

# %%
# Normalization layers are only Lipschitz away from the origin, so the
# constants need the smallest pre-norm radius seen on data.
report = analysis.lipschitz_report(net, test)
for j, r in report["radii"].items():
    print(f"layer {j}: pre-norm radius min {r['min']:.3f} median {r['median']:.3f}")
print("worst-case C_l per tapped layer", {k: round(v, 2) for k, v in report["worst_case_Cl"].items()})

# %%
for layer in model.tappable_layers(net):
    masks = analysis.random_masks(model.component_shape(net.layers[layer]), 50, seed=layer)
    res = analysis.bound_check(net, layer, masks, test)
    ratios = [r.ratio for r in res if r.local_error > 0]
    print(
        f"layer {layer}: all satisfied {all(r.satisfied for r in res)}, "
        f"median global/local {np.median(ratios):.3g} vs C_l^2 {res[0].worst_case_c2:.3g}"
    )
