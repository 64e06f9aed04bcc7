"""
Do the high-fidelity components carry the accuracy?
===================================================

Perturb or delete the top, bottom, or a random quarter of a layer's inputs
and compare the accuracy drops.
"""

import numpy as np

from hifikit import analysis, data, model

source = data.blob_source(8, 20, separation=2.5, components=2, seed=2)
train = data.sample(source, 150, seed=102)
test = data.sample(source, 200, seed=202)
net = model.train(model.mlp(20, [32, 32], 8, seed=2), train, model.TrainConfig(epochs=30, seed=2))

layer = 2
scores = analysis.component_scores(net, layer, data.sample(source, 100, seed=302))
sigma = float(np.std(net.layers[layer].params["weight"]))

for kind in (analysis.HIFI, analysis.RANDOM, analysis.NON_HIFI):
    noise = np.mean([analysis.noise_experiment(net, layer, scores, sigma, 0.25, kind, j, test) for j in range(10)])
    removal = analysis.counterfactual_removal(net, layer, scores, kind, 8, 0, test)
    print(f"{kind:8s} noise {noise:+.3f}  removal {removal:+.3f}")
