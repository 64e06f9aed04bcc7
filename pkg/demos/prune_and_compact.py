"""
Pruning without labels or gradients
===================================

Score hidden units on samples from a synthetic source, drop the ones that
matter least, rescale the rest, then physically shrink the network.
"""

from hifikit import data, model, modify

source = data.blob_source(8, 20, separation=2.5, components=2, seed=0)
train = data.sample(source, 150, seed=100)
test = data.sample(source, 200, seed=200)
net = model.train(model.mlp(20, [32, 32], 8, seed=0), train, model.TrainConfig(epochs=30))
print("test accuracy", model.accuracy(net, test))

# %%
# The union rule keeps any input that is in the top 70% of some output
# channel, which on a small MLP keeps almost everything. The budget rule
# caps the kept count at 70% of the layer instead.
for mode in (modify.UNION, modify.BUDGET):
    for compensate in (True, False):
        plan = modify.PrunePlan([2, 4], keep_fraction=0.7, mode=mode, compensate=compensate)
        pruned, report = modify.modhifi_prune(net, plan, source, test)
        removed = [r["removed"] for r in report["per_layer"]]
        print(f"{mode:6s} compensate={compensate!s:5s} removed {removed} accuracy {report['metrics_after']['accuracy']:.3f}")

# %%
# Zeroed inputs become removable units once compacted.
plan = modify.PrunePlan([2, 4], keep_fraction=0.5, mode=modify.BUDGET)
pruned, report = modify.modhifi_prune(net, plan, source, test)
small = modify.compact(pruned)
print("params", model.parameter_count(net), "->", model.parameter_count(small))
print("MACs", modify.flop_param_report(net)["total"]["macs"], "->", modify.flop_param_report(small)["total"]["macs"])
print("accuracy after compaction", model.accuracy(small, test))
