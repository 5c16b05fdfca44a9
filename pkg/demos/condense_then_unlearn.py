"""Walk through one class-forgetting run step by step with the library API.

1. Generate five Gaussian blobs and pretrain the classifier.
2. Cluster each class, mark the clusters the forget class touches.
3. Blend every free cluster into one prototype; keep the residual raw.
4. Fine-tune on the full retain set and on the reduced one, then compare.

On well-separated blobs the forget class keeps 100% accuracy after
fine-tuning: nothing in the retain data pushes the decision regions of the
forgotten class around, so the table shows the limit of fine-tuning-based
forgetting rather than a success.

Run with ``python demos/condense_then_unlearn.py``; it takes a few seconds.
"""

import numpy as np

from ulab.blend import BlendConfig, build_reduced_retain, condense_free
from ulab.data import build_splits, gen_gaussian_classes
from ulab.evaluation import report
from ulab.nn import TrainConfig, default_dims, init_model, sample_extractor, train
from ulab.partition import partition_dataset, sample_F
from ulab.unlearn import UnlearnConfig, run_unlearning

ds = gen_gaussian_classes(n_classes=5, per_class=400, d=8, separation=20.0, seed=0)
train_ids = ds.train_ids
model, _ = train(init_model(default_dims(ds.n_features, ds.n_classes), seed=0),
                 ds.samples[train_ids], ds.labels[train_ids], TrainConfig(epochs=10))

forget = train_ids[ds.labels[train_ids] == 0]
splits = build_splits(ds, forget)
print(f"|R|={len(splits.retain)} |F|={len(splits.forget)} |T|={len(splits.t)} "
      f"|test_eval|={len(splits.test_eval)}")

part = partition_dataset(ds.samples[train_ids], ds.labels[train_ids], sample_extractor(1), k=10, seed=0,
                         ids=train_ids)
split = sample_F(part, forget)
print(f"{len(split.free_cluster_ids)} free clusters, {len(split.forget_cluster_ids)} touch F, "
      f"{len(split.residual_image_ids)} residual images")

condensed = condense_free(part, split, ds.samples, BlendConfig())
drops = [p.weights.initial_loss - p.weights.final_loss for p in condensed.prototypes]
print(f"condensed {len(condensed)} clusters in {condensed.seconds:.3f}s; "
      f"mean blend-loss drop {np.mean(drops):.2e}")
reduced = build_reduced_retain(condensed, split.residual_image_ids, ds.samples, ds.labels, forget)
splits.retain_sources["reduced"] = reduced
print(f"reduced retain set: {len(reduced)} rows ({100 * len(reduced) / len(splits.retain):.1f}% of R)")

print(f"{'method':8} {'source':8} {'mia':>6} {'retain':>7} {'forget':>7} {'test':>7} {'seconds':>8}")
for method in ("cf", "a_cf"):
    for source in ("full", "reduced"):
        run = run_unlearning(model, splits, UnlearnConfig(method=method, retain_source=source),
                             preprocessing_seconds=condensed.seconds if source == "reduced" else 0.0)
        r = report(run, splits)
        print(f"{method:8} {source:8} {r.mia_score:6.2f} {r.retain_acc:7.2f} {r.forget_acc:7.2f} "
              f"{r.test_acc:7.2f} {run.total_seconds:8.3f}")
