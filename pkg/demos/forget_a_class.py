"""
Forgetting one class
====================

Score components on samples of the class to forget only, then zero each
output channel's most faithful inputs for that class. No retraining.
"""

from hifikit import data, model, modify

source = data.blob_source(3, 16, separation=4.0, seed=1)
train = data.sample(source, 150, seed=2)
test = data.sample(source, 200, seed=3)
net = model.train(model.mlp(16, [64, 64], 3, seed=1), train, model.TrainConfig(epochs=30))

forget = data.sample(source, 100, classes=[0], seed=4)
for fraction in (0.05, 0.1, 0.2):
    plan = modify.UnlearnPlan(0, [2, 4], fraction=fraction)
    _, report = modify.modhifi_unlearn(net, plan, forget, test)
    before, after = report["metrics_before"], report["metrics_after"]
    print(
        f"fraction {fraction:.2f}: forget {before['forget_accuracy']:.2f} -> {after['forget_accuracy']:.2f}, "
        f"retain {before['retain_accuracy']:.2f} -> {after['retain_accuracy']:.2f}"
    )
