"""Train a small energy-score network and compare it with pairwise likelihood.

Runs in about a minute on one core: 2000 training fields on an 8x8 grid.

    python3 demos/posterior_network.py
"""
import numpy as np

from genmaxstable import generative_estimator as ge
from genmaxstable.baselines import fit_pl
from genmaxstable.simulator import GridSpec, PriorBox, generate_training_set
from genmaxstable.spatial_core import Family

grid = GridSpec.square(8, 8.0)
train = generate_training_set(PriorBox(), 2000, Family.BROWN_RESNICK, grid, seed=1)
test = generate_training_set(PriorBox(), 5, Family.BROWN_RESNICK, grid, seed=2)

model = ge.train(train, ge.TrainConfig(max_epochs=80, seed=0),
                 spec=ge.NetworkSpec(8, 8, channels=(16, 32, 64), dense_width=64))
print(f"trained {model.epoch} epochs, best validation energy score {model.best_val:.4f}")

print("truth (lam, nu)     network mean        95% interval                 pairwise likelihood")
for field, truth in zip(test.fields, np.asarray(test.params)):
    pred = ge.predict(model, field, seed=3)
    pl = fit_pl(field, Family.BROWN_RESNICK, grid=grid).params
    print(f"({truth[0]:.2f}, {truth[1]:.2f})   ({pred.mean[0]:.2f}, {pred.mean[1]:.2f})   "
          f"[{pred.lower[0]:.2f}, {pred.upper[0]:.2f}] x [{pred.lower[1]:.2f}, {pred.upper[1]:.2f}]   "
          f"({pl.lam:.2f}, {pl.nu:.2f})")
