"""Flip 10% of the labels and see how many of them DIT ranks at the bottom.

Mislabeled samples push the test loss up, so their influence is negative.
Taking the k most negative scores (k = number of flips) recovers most of them.
"""

from dit_lab import analytics, data, dit, trainer
from dit_lab.numkit import ModelSpec
from dit_lab.trainer import TrainConfig

full = data.make_synthetic(seed=3, N=450, d=30, class_separation=6.0)
clean, test = data.split(full, 250)
train, flips = data.flip_labels(clean, 0.1, seed=3)

model = ModelSpec("logistic", 30)
cfg = TrainConfig(steps=200, batch_size=25, lr=0.1, seed=3)
store = trainer.train(train, model, cfg)
q = dit.TestSetLoss(test.X, test.y)

spe = trainer.steps_per_epoch(len(train), cfg.batch_size)
windows = {
    "full": dit.TimeWindow(0, cfg.steps),
    "first epoch": dit.TimeWindow(0, spe),
    "last epoch": dit.TimeWindow(cfg.steps - spe, cfg.steps),
}
k = len(flips.flipped_indices)
for name, w in windows.items():
    found = analytics.evaluate_detection(dit.influence_vector(store, train, q, w), flips)
    print(f"{name:>12}: {found}/{k} flipped samples found")
