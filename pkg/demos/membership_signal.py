"""How the gaussianized loss gap separates a model that saw F from one that did not.

A pretrained model has lower loss on the forget set F than on held-out
samples of the same class T. Retraining without F removes the gap. The
script prints MMD between the gaussianized loss samples and the
threshold-MIA score for both models.
"""

import numpy as np

from ulab.data import build_splits, gen_gaussian_classes
from ulab.evaluation import mia_score, per_sample_losses
from ulab.gaussianize import gaussianize_losses, mmd
from ulab.nn import TrainConfig, default_dims, init_model, train

# overlapping blobs and a long schedule so the net memorises its training rows
ds = gen_gaussian_classes(n_classes=4, per_class=80, d=8, separation=2.0, seed=0)
rng = np.random.default_rng(0)
forget = np.sort(rng.choice(ds.train_ids, size=40, replace=False))
splits = build_splits(ds, forget)
dims = default_dims(ds.n_features, ds.n_classes)
cfg = TrainConfig(epochs=200)

x, y = ds.samples[ds.train_ids], ds.labels[ds.train_ids]
pretrained, _ = train(init_model(dims, seed=0), x, y, cfg)
retrained, _ = train(init_model(dims, seed=0), splits.retain.x, splits.retain.y, cfg)

for name, model in (("pretrained", pretrained), ("retrained", retrained)):
    lf, lt = per_sample_losses(model, splits.forget), per_sample_losses(model, splits.t)
    z = gaussianize_losses(np.concatenate([lf, lt]))
    gap = float(mmd(z[:len(lf)], z[len(lf):]))
    print(f"{name:10}  mean log1p CE  F={lf.mean():.3f}  T={lt.mean():.3f}  "
          f"MMD={gap:.4f}  threshold-MIA={mia_score(model, splits.forget, splits.t):.2f}")
