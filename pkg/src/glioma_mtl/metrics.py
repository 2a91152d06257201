"""Classification and segmentation metrics.

Binary AUC is the Mann-Whitney rank statistic (ties count one half). The
multi-class AUC is the one-vs-one average of Hand & Till. Hausdorff distance
is taken between surface voxels, in millimetres.
"""

from __future__ import annotations

import itertools
import warnings

import numpy as np
from scipy import ndimage, stats
from scipy.spatial import cKDTree

from .errors import UndefinedMetricError


def _binary_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetricError("AUC needs at least one positive and one negative sample")
    return scores, labels


def binary_auc(scores, labels) -> float:
    scores, labels = _binary_inputs(scores, labels)
    ranks = stats.rankdata(scores)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ovo_multiclass_auc(score_matrix, labels) -> float:
    """Hand & Till one-vs-one AUC averaged over all class pairs.

    Pairs with an absent class are skipped with a warning.
    """
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    c = scores.shape[1]
    pair_aucs = []
    for i, j in itertools.combinations(range(c), 2):
        sel = (labels == i) | (labels == j)
        if not (labels == i).any() or not (labels == j).any():
            warnings.warn(f"class pair ({i}, {j}) skipped: a class has no samples")
            continue
        a_ij = binary_auc(scores[sel, i], labels[sel] == i)
        a_ji = binary_auc(scores[sel, j], labels[sel] == j)
        pair_aucs.append(0.5 * (a_ij + a_ji))
    if not pair_aucs:
        raise UndefinedMetricError("no class pair has samples of both classes")
    return float(np.mean(pair_aucs))


def roc_points(scores, labels, threshold=0.5):
    """ROC curve from a sweep over the unique scores.

    Returns ``(points, operating_point)`` where ``points`` is a list of
    ``(fpr, tpr)`` from (0, 0) to (1, 1) and the operating point is the
    ``(fpr, tpr)`` of predicting positive when ``score > threshold``.
    """
    scores, labels = _binary_inputs(scores, labels)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    points = [(0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        pred = scores >= t
        points.append((float((pred & ~labels).sum() / n_neg), float((pred & labels).sum() / n_pos)))
    pred = scores > threshold
    op = (float((pred & ~labels).sum() / n_neg), float((pred & labels).sum() / n_pos))
    return points, op


def confusion_matrix(actual, predicted, n_classes):
    """``m[a, p]`` counts samples of actual class ``a`` predicted as ``p``."""
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    for a, p in zip(np.asarray(actual, dtype=int), np.asarray(predicted, dtype=int)):
        m[a, p] += 1
    return m


def classification_report(predictions, labels, positive_class=1, n_classes=None):
    """Accuracy, sensitivity, specificity and the confusion matrix.

    ``positive_class=None`` gives a multi-class report (accuracy only, the
    other entries ``None``). Undefined ratios are ``None`` as well.
    """
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if predictions.size == 0:
        raise ValueError("classification_report needs at least one sample")
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if n_classes is None:
        n_classes = int(max(predictions.max(), labels.max())) + 1
    cm = confusion_matrix(labels, predictions, n_classes)
    report = {"n": int(labels.size), "accuracy": float(np.trace(cm) / cm.sum()),
              "sensitivity": None, "specificity": None, "confusion_matrix": cm}
    if positive_class is not None:
        pos_true = labels == positive_class
        pos_pred = predictions == positive_class
        tp = int((pos_true & pos_pred).sum())
        fn = int((pos_true & ~pos_pred).sum())
        tn = int((~pos_true & ~pos_pred).sum())
        fp = int((~pos_true & pos_pred).sum())
        report["sensitivity"] = tp / (tp + fn) if tp + fn else None
        report["specificity"] = tn / (tn + fp) if tn + fp else None
        if n_classes > 2:
            report["accuracy"] = (tp + tn) / labels.size
    return report


# -- segmentation ----------------------------------------------------------------

def _masks(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice_score(pred_mask, gt_mask) -> float:
    a, b = _masks(pred_mask, gt_mask)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def volumetric_similarity(pred_mask, gt_mask) -> float:
    a, b = _masks(pred_mask, gt_mask)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 1.0 - abs(na - nb) / (na + nb)


def surface_voxels(mask):
    """Coordinates of mask voxels with a 6-neighbour outside the mask (or volume)."""
    m = np.asarray(mask).astype(bool)
    interior = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(3, 1),
                                      border_value=0)
    return np.argwhere(m & ~interior)


def hausdorff_mm(pred_mask, gt_mask, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance between the two surfaces, in mm."""
    a, b = _masks(pred_mask, gt_mask)
    if not a.any() or not b.any():
        raise UndefinedMetricError("Hausdorff distance is undefined for an empty mask")
    spacing = np.asarray(spacing, dtype=np.float64)
    pa = surface_voxels(a) * spacing
    pb = surface_voxels(b) * spacing
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


def segmentation_report(pred_mask, gt_mask, spacing=(1.0, 1.0, 1.0)):
    """DICE, Hausdorff (``None`` when undefined) and volumetric similarity."""
    try:
        hd = hausdorff_mm(pred_mask, gt_mask, spacing)
    except UndefinedMetricError:
        hd = None
    return {"dice": dice_score(pred_mask, gt_mask), "hausdorff_mm": hd,
            "volumetric_similarity": volumetric_similarity(pred_mask, gt_mask)}
