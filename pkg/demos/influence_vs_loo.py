"""Train a small logistic regression, then compare DIT influence with leave-one-out.

Every sample gets a DIT score from one backward sweep. The same scores are
recomputed by actually retraining without each sample, replaying the
recorded batches. On a convex model the two rankings should nearly agree.
"""

import numpy as np

from dit_lab import analytics, baselines, data, dit, trainer
from dit_lab.numkit import ModelSpec
from dit_lab.trainer import TrainConfig

full = data.make_synthetic(seed=0, N=300, d=20, class_separation=2.0)
train, test = data.split(full, 200)
model = ModelSpec("logistic", 20)
cfg = TrainConfig(steps=500, batch_size=20, lr=0.1, seed=0)

store = trainer.train(train, model, cfg)
q = dit.TestSetLoss(test.X, test.y)
w = dit.TimeWindow(0, cfg.steps)

est = dit.influence_vector(store, train, q, w)
loo = baselines.loo_all(train, model, cfg, store.batches(), test, reference=store)

for name, v in analytics.agreement(est, loo).items():
    print(f"{name:>9}: {v:.3f}")

# the samples whose removal would help the test loss the most
helpful = np.argsort(est)[:5]
print("most harmful samples:", helpful.tolist())
print("their LOO loss change:", np.round(loo[helpful], 5).tolist())

# influence restricted to the last epoch only
spe = trainer.steps_per_epoch(len(train), cfg.batch_size)
late = dit.influence_vector(store, train, q, dit.TimeWindow(cfg.steps - spe, cfg.steps))
print(f"tau(full window, last epoch) = {analytics.kendall_tau(est, late):.3f}")
