"""Why multiplicative fusion matters.

The ``interaction`` generator hides the class label in the *sign of the
product* of three per-modality amplitudes. Each modality alone (and each
pair) is statistically independent of the label, so any model that combines
modalities additively is stuck at chance. Polynomial fusion sees the
three-way product and separates the classes.

Runtime: around a minute on one core.
"""

import numpy as np

from trifuse import data, models, train

ds = data.synth_dataset(data.SynthSpec("interaction", n_trials=1200, noise=0.1), seed=7)
print(f"{len(ds)} segments, class balance {ds.labels.mean():.2f}")
for m in range(3):
    corr = np.corrcoef(ds.labels, ds.planted[:, m])[0, 1]
    print(f"  corr(label, modality-{m + 1} amplitude) = {corr:+.3f}")
print()

plan = data.make_folds(ds, k=5, seed=0)
split = data.fold_indices(ds, plan, 0)
cfg = train.TrainConfig(epochs=8, batch_size=32, seed=0)

for label, fusion in [
    ("LF (additive)", {"kind": "LF", "output_dim": 16}),
    ("PF p=3 symmetric (multiplicative)",
     {"kind": "PF", "output_dim": 16, "rank": 16, "order": 3, "symmetric": True}),
]:
    spec = {"type": "fused", "profile": "desk", "fusion": fusion}
    model = models.build_from_spec(spec, seed=1)
    report = train.train(model, ds, split, cfg)
    print(f"{label:36} held-out accuracy {report.test_accuracy:.3f} "
          f"(final loss {report.losses[-1]:.3f})")

print("\nLF cannot express a three-way product, so it stays near 0.5.")
