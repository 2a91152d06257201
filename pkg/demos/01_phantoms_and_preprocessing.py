"""
Synthetic phantoms and preprocessing
====================================

Phantoms stand in for patient scans: four contrasts, one lesion, and labels
that leave a visible trace in the images. Most labels are hidden, the same
way most patients in a real cohort miss one or more genetic tests.
"""

import numpy as np

from glioma_mtl.data_model import OUTPUTS
from glioma_mtl.preprocess import PreprocessConfig, preprocess_case
from glioma_mtl.synthdata import PhantomSpec, brain_mask, generate

spec = PhantomSpec(seed=0)
cases, truths = generate(spec, 50, with_truth=True)

# how many labels survive the missingness?
for name in OUTPUTS:
    known = sum(c.labels.is_known(name) for c in cases)
    print(f"{name:>10}: {known:2d} of {len(cases)} known")

# the IDH status shows up as a brighter lesion in T2
case, truth = cases[0], truths[0]
lesion = truth["mask"].astype(bool)
t2 = case.channels[2].values
print("IDH", truth["labels"].category("idh"), "| T2 lesion mean", t2[lesion].mean().round(2),
      "| T2 brain mean", t2[brain_mask(spec) > 0].mean().round(2))

# preprocessing: crop to the brain bounding box, then z-score each channel
# inside the brain
processed, info = preprocess_case(case, PreprocessConfig(), brain_mask(spec))
print("shape", case.shape, "->", processed.shape, "offset", info["offset"])
o, n = info["offset"], processed.shape
brain = brain_mask(spec)[o[0]:o[0] + n[0], o[1]:o[1] + n[1], o[2]:o[2] + n[2]] > 0
for name, ch in zip(("T1", "T1c", "T2", "FLAIR"), processed.channels):
    v = np.asarray(ch.values)
    # outside the brain every voxel holds the lowest value found inside it
    print(f"{name:>5}: mean {v[brain].mean():+.3f} std {v[brain].std():.3f} "
          f"outside {np.unique(v[~brain]).round(3)}")
