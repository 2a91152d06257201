"""Deterministic 3D phantoms whose labels are encoded in the images.

Every phantom shares one ellipsoidal "brain" (as if registered to an atlas)
and carries one ellipsoidal lesion. The labels leave visible cues:

* IDH mutated      -> the lesion is brighter in T2
* 1p/19q co-deleted -> a bright rim around the lesion in FLAIR
* grade            -> an enhancing core in post-contrast T1 (faint for III,
                      bright for IV, absent for II)

The lesion is always hyperintense on FLAIR so it can be segmented.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import (Case, SegmentationSource, VolumeGrid, VolumeKind, index_labelset)

CHANNEL_BASE = (1.0, 1.0, 0.8, 0.9)


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (32, 32, 32)
    lesion_radius: tuple = (4.0, 8.0)
    margin: float = 1.5
    noise_std: float = 0.2
    idh_mutated_prior: float = 0.4
    codeleted_prior: float = 0.35
    grade_priors: tuple = (0.3, 0.2, 0.5)
    missingness: dict = field(default_factory=lambda: {
        "idh": 0.55, "codeletion": 0.70, "grade": 0.22, "segmentation": 0.0})
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name, rate in self.missingness.items():
            if not 0 <= rate <= 1:
                raise ValueError(f"missingness for {name} must be in [0, 1], got {rate}")
        lo, hi = self.lesion_radius
        if not 0 < lo <= hi:
            raise ValueError("lesion_radius must satisfy 0 < min <= max")
        if hi + 2.5 >= min(self.brain_radii):
            raise ValueError(f"lesion radius {hi} does not fit inside the brain of shape {self.shape}")
        if abs(sum(self.grade_priors) - 1) > 1e-9:
            raise ValueError("grade_priors must sum to 1")

    @property
    def brain_radii(self):
        return tuple(0.45 * n for n in self.shape)


def _grid(shape):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")


def brain_mask(spec: PhantomSpec) -> np.ndarray:
    coords = _grid(spec.shape)
    centre = [(n - 1) / 2 for n in spec.shape]
    r = sum(((c - m) / a) ** 2 for c, m, a in zip(coords, centre, spec.brain_radii))
    return (r <= 1.0).astype(np.uint8)


def _ellipsoid(coords, centre, radii):
    return sum(((c - m) / a) ** 2 for c, m, a in zip(coords, centre, radii))


def _phantom(spec: PhantomSpec, index: int, brain, coords):
    rng = np.random.default_rng([spec.seed, index])
    idh = int(rng.random() < spec.idh_mutated_prior)
    codel = int(rng.random() < spec.codeleted_prior)
    grade = int(rng.choice(3, p=spec.grade_priors))

    radii = rng.uniform(*spec.lesion_radius, size=3)
    centre_img = np.array([(n - 1) / 2 for n in spec.shape])
    # keep the lesion (plus its rim) inside the brain
    room = np.array(spec.brain_radii) - radii.max() - 2.5
    while True:
        offset = rng.uniform(-1, 1, size=3) * room
        if np.sum((offset / np.maximum(room, 1e-9)) ** 2) <= 1:
            break
    centre = centre_img + offset
    r = _ellipsoid(coords, centre, radii)
    lesion = r <= 1.0
    rim = (r > 1.0) & (r <= (1 + 1.5 / radii.min()) ** 2)
    core = r <= 0.3

    m = spec.margin
    channels = []
    for c, base in enumerate(CHANNEL_BASE):
        img = np.full(spec.shape, base) + rng.normal(0, spec.noise_std, spec.shape)
        if c == 1:  # post-contrast T1
            img[core] += (0.0, 0.5, 1.0)[grade] * m
        elif c == 2:  # T2
            img[lesion] += 0.5 + idh * m
        elif c == 3:  # FLAIR
            img[lesion] += 1.0
            if codel:
                img[rim] += m
        img[brain == 0] = 0.0
        channels.append(VolumeGrid(img.astype(np.float32), spec.spacing))

    truth = index_labelset(idh, codel, grade)
    miss = rng.random(4)
    rates = spec.missingness
    observed = index_labelset(
        None if miss[0] < rates.get("idh", 0) else idh,
        None if miss[1] < rates.get("codeletion", 0) else codel,
        None if miss[2] < rates.get("grade", 0) else grade)
    seg = None
    if miss[3] >= rates.get("segmentation", 0):
        seg = VolumeGrid(lesion.astype(np.uint8), spec.spacing, VolumeKind.BINARY_MASK)
    case = Case(f"phantom_{index:04d}", tuple(channels), observed, seg,
                SegmentationSource.MANUAL if seg is not None else SegmentationSource.NONE)
    return case, truth, lesion.astype(np.uint8)


def generate(spec: PhantomSpec, n: int, with_truth=False, start=0):
    """Generate ``n`` phantoms; fully determined by ``spec.seed`` and the index.

    With ``with_truth=True`` returns ``(cases, truths)`` where ``truths`` holds
    the complete labels and the lesion mask for every case, independent of
    missingness.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    brain = brain_mask(spec)
    coords = _grid(spec.shape)
    cases, truths = [], []
    for i in range(start, start + n):
        case, labels, lesion = _phantom(spec, i, brain, coords)
        cases.append(case)
        truths.append({"labels": labels, "mask": lesion})
    return (cases, truths) if with_truth else cases


def write_dataset(spec: PhantomSpec, n: int, root):
    """Write phantoms in the on-disk ingestion layout.

    ``root/cases/<id>/*.nii.gz``, ``root/labels.csv`` (observed labels),
    ``root/truth_labels.csv`` (complete labels), ``root/truth_masks/<id>.nii.gz``
    and ``root/brain_mask.nii.gz``.
    """
    from .preprocess import save_case, write_labels_csv, write_volume

    root = Path(root)
    cases, truths = generate(spec, n, with_truth=True)
    for case, truth in zip(cases, truths):
        save_case(case, root / "cases" / case.case_id)
        (root / "truth_masks").mkdir(parents=True, exist_ok=True)
        write_volume(truth["mask"], root / "truth_masks" / f"{case.case_id}.nii.gz", spec.spacing)
    write_labels_csv(root / "labels.csv", cases)
    write_labels_csv(root / "truth_labels.csv",
                     [(c.case_id, t["labels"]) for c, t in zip(cases, truths)])
    write_volume(brain_mask(spec), root / "brain_mask.nii.gz", spec.spacing)
    return cases, truths
