"""From raw network outputs to labels, LGG/HGG scores, a single-lesion mask and a WHO subtype."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data_model import (OUTPUTS, VOCABULARY, PredictionRecord, VolumeGrid, VolumeKind)

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


def argmax_label(scores) -> int:
    """Index of the highest score; ties go to the lowest index."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("cannot take argmax of an empty score vector")
    return int(np.argmax(scores))


def lgg_hgg_scores(grade_scores):
    """``(II + III, IV)``."""
    g = np.asarray(grade_scores, dtype=np.float64)
    if g.shape != (3,):
        raise ValueError(f"grade scores must have 3 entries, got shape {g.shape}")
    return (float(g[0] + g[1]), float(g[2]))


def binarize(tumor_probability):
    """Foreground where the tumour class wins the two-class argmax (p > 0.5)."""
    return (np.asarray(tumor_probability) > 0.5).astype(np.uint8)


def largest_component(mask):
    """Keep the largest 26-connected component.

    Ties go to the component holding the lexicographically smallest voxel,
    which is the one labelled first by the raster-order labelling.
    """
    m = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(m, structure=CONNECTIVITY_26)
    if n <= 1:
        return m.astype(np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return (labels == keep).astype(np.uint8)


def who2016_subtype(idh_label, codeletion_label, grade_label) -> str:
    """WHO 2016 glioma category from class indices or vocabulary strings.

    A 1p/19q co-deletion is only defined for IDH-mutated lower-grade glioma;
    any other co-deleted combination is reported as ``"other"``.
    """
    idx = []
    for name, value in zip(OUTPUTS, (idh_label, codeletion_label, grade_label)):
        if value is None:
            raise ValueError(f"{name} label is unknown; the WHO mapping needs all three")
        if isinstance(value, str):
            if value not in VOCABULARY[name]:
                raise ValueError(f"unknown {name} label {value!r}")
            value = VOCABULARY[name].index(value)
        idx.append(int(value))
    mutated, codeleted, grade = idx[0] == 1, idx[1] == 1, idx[2]
    lower_grade = grade in (0, 1)
    if codeleted:
        return "oligodendroglioma" if mutated and lower_grade else "other"
    if lower_grade:
        return "astro_idh_mut" if mutated else "astro_idh_wt"
    return "gbm_idh_mut" if mutated else "gbm_idh_wt"


def build_prediction_record(case_id, idh_scores, codeletion_scores, grade_scores,
                            tumor_probability=None, spacing=(1.0, 1.0, 1.0)) -> PredictionRecord:
    idh = np.asarray(idh_scores, dtype=np.float64)
    codel = np.asarray(codeletion_scores, dtype=np.float64)
    grade = np.asarray(grade_scores, dtype=np.float64)
    derived = {"idh": argmax_label(idh), "codeletion": argmax_label(codel),
               "grade": argmax_label(grade)}
    prob = None
    if tumor_probability is not None:
        prob = tumor_probability if isinstance(tumor_probability, VolumeGrid) else VolumeGrid(
            np.clip(np.asarray(tumor_probability, dtype=np.float32), 0, 1), spacing,
            VolumeKind.PROBABILITY)
    return PredictionRecord(
        case_id=case_id, idh_scores=idh, codeletion_scores=codel, grade_scores=grade,
        lgg_hgg_scores=lgg_hgg_scores(grade), tumor_probability=prob,
        derived_labels=derived,
        who_subtype=who2016_subtype(derived["idh"], derived["codeletion"], derived["grade"]))


def final_segmentation(tumor_probability):
    """Binarize and keep the largest component."""
    return largest_component(binarize(tumor_probability))
