"""
Train a toy model and look inside
=================================

Trains on phantoms with most labels missing, then scores held-out cases,
segments them, and draws a saliency map. Pass the number of epochs as the
first argument (default 10; the test-suite setting is 40).
"""

import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from glioma_mtl.augment import AugmentConfig
from glioma_mtl.data_model import Sample
from glioma_mtl.interpret import smoothgrad_saliency
from glioma_mtl.metrics import binary_auc, dice_score
from glioma_mtl.network import NetworkSpec, build_psnet, forward
from glioma_mtl.postprocess import final_segmentation
from glioma_mtl.preprocess import PreprocessConfig, preprocess_case
from glioma_mtl.synthdata import PhantomSpec, brain_mask, generate
from glioma_mtl.trainer import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
out_dir = Path("demo_output")
out_dir.mkdir(exist_ok=True)

spec = PhantomSpec(seed=1)
cases, truths = generate(spec, 200, with_truth=True)
bm = brain_mask(spec)
cases = [preprocess_case(c, PreprocessConfig(), bm)[0] for c in cases]
samples = [Sample.from_case(c) for c in cases]
train_set, test_set = samples[:160], samples[160:]

net = NetworkSpec(input_shape=samples[0].image.shape[1:] + (4,), depths=3, base_filters=8,
                  dropout_rate=0.1, l2_strength=0.0)
config = TrainConfig(initial_lr=1e-3, max_epochs=epochs, micro_batch=8, plateau_patience=10,
                     early_stop_window=50)
result = train(build_psnet(net, seed=0), train_set, None, config,
               AugmentConfig(probability=0.0, factor=1))
for r in result.history[::max(1, epochs // 5)]:
    print(f"epoch {r.epoch:3d}  lr {r.lr:.1e}  loss {r.train_loss:.4f}")

model = result.model
with torch.no_grad():
    out = forward(model, torch.as_tensor(np.stack([s.image for s in test_set])))

# held-out scores against the complete labels, not the observed ones
for head in ("idh", "codeletion"):
    y = [t["labels"].index(head) for t in truths[160:]]
    print(f"{head} AUC {binary_auc(out[f'{head}_scores'][:, 1].numpy(), y):.3f}")
dices = [dice_score(final_segmentation(p[1].numpy()), c.segmentation.values)
         for p, c in zip(out["seg_probabilities"], cases[160:])]
print(f"mean DICE {np.mean(dices):.3f}")

# saliency for the co-deletion head on a co-deleted case
idx = next(i for i, t in enumerate(truths[160:]) if t["labels"].index("codeletion") == 1)
maps = smoothgrad_saliency(model, test_set[idx], "codeletion")
z = test_set[idx].image.shape[-1] // 2
fig, axes = plt.subplots(1, 4, figsize=(12, 3))
for ax, name, image, grid in zip(axes, ("T1", "T1c", "T2", "FLAIR"), test_set[idx].image, maps):
    ax.imshow(image[:, :, z].T, cmap="gray", origin="lower")
    ax.imshow(np.asarray(grid.values)[:, :, z].T, cmap="hot", alpha=0.5, origin="lower")
    ax.set_title(name)
    ax.axis("off")
fig.savefig(out_dir / "saliency.png", dpi=100)
print("saliency figure written to", out_dir / "saliency.png")
