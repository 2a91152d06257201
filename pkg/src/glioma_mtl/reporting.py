"""Prediction tables, metric reports, confusion matrices and ROC figures.

CSV values are written as fixed-precision strings so that identical inputs
give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path

import numpy as np

from .data_model import OUTPUTS, VOCABULARY, WHO_SUBTYPES
from .errors import UndefinedMetricError
from .metrics import (binary_auc, classification_report, confusion_matrix, ovo_multiclass_auc,
                      roc_points)
from .postprocess import who2016_subtype

NA = "N/A"
SCORE_COLUMNS = ("idh_wt", "idh_mut", "codel_intact", "codel_codel", "grade_II", "grade_III",
                 "grade_IV")
PREDICTION_COLUMNS = ("case_id",) + SCORE_COLUMNS + (
    "lgg", "hgg", "pred_idh", "pred_codel", "pred_grade", "who_subtype")
TRUTH_COLUMNS = ("gt_idh", "gt_codel", "gt_grade", "gt_who_subtype")
SEGMENTATION_COLUMNS = ("case_id", "dice", "hausdorff_mm", "volumetric_similarity")
_SHORT = {"idh": "idh", "codeletion": "codel", "grade": "grade"}


def fmt(value, digits=6):
    if value is None:
        return ""
    return f"{float(value):.{digits}f}"


def write_csv(path, rows, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader), tuple(reader.fieldnames or ())


# -- predictions -------------------------------------------------------------------

def prediction_row(record, truth=None):
    """One predictions-CSV row (strings) from a :class:`PredictionRecord`.

    ``truth`` is an optional :class:`LabelSet`; unknown truth cells stay empty.
    """
    scores = list(record.idh_scores) + list(record.codeletion_scores) + list(record.grade_scores)
    row = {"case_id": record.case_id}
    row.update({c: fmt(v) for c, v in zip(SCORE_COLUMNS, scores)})
    row["lgg"], row["hgg"] = (fmt(v) for v in record.lgg_hgg_scores)
    for name in OUTPUTS:
        row[f"pred_{_SHORT[name]}"] = VOCABULARY[name][record.derived_labels[name]]
    row["who_subtype"] = record.who_subtype
    if truth is not None:
        cats = {name: truth.category(name) for name in OUTPUTS}
        for name in OUTPUTS:
            row[f"gt_{_SHORT[name]}"] = cats[name] or ""
        if all(cats.values()):
            row["gt_who_subtype"] = who2016_subtype(*(cats[n] for n in OUTPUTS))
    return row


def write_predictions(path, records, truths=None):
    """Write the predictions CSV; ``truths`` maps case ids to label sets."""
    columns = PREDICTION_COLUMNS + (TRUTH_COLUMNS if truths is not None else ())
    rows = [prediction_row(r, None if truths is None else truths.get(r.case_id))
            for r in records]
    write_csv(path, rows, columns)
    return rows


def _scores(rows, columns):
    return np.array([[float(r[c]) for c in columns] for r in rows], dtype=np.float64)


# -- metrics -------------------------------------------------------------------

def _safe(fn, *args):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return fn(*args)
    except (UndefinedMetricError, ValueError):
        return None


def _binary_metrics(rows, truth_col, pred_col, score_col, positive):
    known = [r for r in rows if r.get(truth_col)]
    if not known:
        return {"n": 0, "auc": NA, "accuracy": NA, "sensitivity": NA, "specificity": NA}
    y = np.array([r[truth_col] == positive for r in known], dtype=int)
    p = np.array([r[pred_col] == positive for r in known], dtype=int)
    auc = _safe(binary_auc, [float(r[score_col]) for r in known], y)
    rep = classification_report(p, y, positive_class=1, n_classes=2)
    return {"n": len(known), "auc": auc, "accuracy": rep["accuracy"],
            "sensitivity": rep["sensitivity"], "specificity": rep["specificity"]}


def _grade_metrics(rows):
    known = [r for r in rows if r.get("gt_grade")]
    if not known:
        return {"n": 0, "auc": NA, "accuracy": NA}
    vocab = VOCABULARY["grade"]
    y = np.array([vocab.index(r["gt_grade"]) for r in known])
    p = np.array([vocab.index(r["pred_grade"]) for r in known])
    auc = _safe(ovo_multiclass_auc, _scores(known, SCORE_COLUMNS[4:]), y)
    return {"n": len(known), "auc": auc, "accuracy": float(np.mean(y == p))}


def _lgg_hgg_rows(rows):
    out = []
    for r in rows:
        if r.get("gt_grade"):
            r = dict(r, gt_lgg_hgg="HGG" if r["gt_grade"] == "IV" else "LGG",
                     pred_lgg_hgg="HGG" if float(r["hgg"]) > float(r["lgg"]) else "LGG")
            out.append(r)
    return out


def _seg_metrics(seg_rows):
    if not seg_rows:
        return {"n": 0, "dice": NA, "hausdorff_mm": NA, "volumetric_similarity": NA}
    out = {"n": len(seg_rows)}
    for key in SEGMENTATION_COLUMNS[1:]:
        vals = [float(r[key]) for r in seg_rows if r.get(key) not in (None, "")]
        out[key] = float(np.mean(vals)) if vals else NA
        out[f"{key}_std"] = float(np.std(vals)) if vals else NA
    return out


def _clean(report):
    if isinstance(report, dict):
        return {k: _clean(v) for k, v in report.items()}
    if report is None:
        return NA
    if isinstance(report, float):
        return round(report, 10)
    return report


def metrics_report(rows, seg_rows=()):
    """Nested ``{patient_group: {task: {metric: value}}}``; undefined values are ``"N/A"``.

    Groups are ``all``, ``LGG`` and ``HGG`` (by ground-truth grade).
    """
    seg_by_id = {r["case_id"]: r for r in seg_rows}
    groups = {
        "all": rows,
        "LGG": [r for r in rows if r.get("gt_grade") in ("II", "III")],
        "HGG": [r for r in rows if r.get("gt_grade") == "IV"],
    }
    report = {}
    for group, members in groups.items():
        lh = _lgg_hgg_rows(members)
        report[group] = {
            "idh": _binary_metrics(members, "gt_idh", "pred_idh", "idh_mut", "mutated"),
            "codeletion": _binary_metrics(members, "gt_codel", "pred_codel", "codel_codel",
                                          "co-deleted"),
            "grade": _grade_metrics(members),
            "lgg_hgg": _binary_metrics(lh, "gt_lgg_hgg", "pred_lgg_hgg", "hgg", "HGG"),
            "segmentation": _seg_metrics([seg_by_id[r["case_id"]] for r in members
                                          if r["case_id"] in seg_by_id]),
        }
    return _clean(report)


def write_metrics_json(path, report):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


# -- confusion matrices -------------------------------------------------------------

def confusion_tables(rows):
    """``{task: (class_names, matrix)}`` over cases with known ground truth."""
    tables = {}
    for name in OUTPUTS:
        short = _SHORT[name]
        known = [r for r in rows if r.get(f"gt_{short}")]
        vocab = VOCABULARY[name]
        m = confusion_matrix([vocab.index(r[f"gt_{short}"]) for r in known],
                             [vocab.index(r[f"pred_{short}"]) for r in known], len(vocab))
        tables[name] = (vocab, m)
    known = [r for r in rows if r.get("gt_who_subtype")]
    m = confusion_matrix([WHO_SUBTYPES.index(r["gt_who_subtype"]) for r in known],
                         [WHO_SUBTYPES.index(r["who_subtype"]) for r in known], len(WHO_SUBTYPES))
    tables["who_subtype"] = (WHO_SUBTYPES, m)
    return tables


def write_confusion_csv(path, class_names, matrix):
    """Rows are actual classes, columns predicted classes."""
    rows = [dict({"actual": a}, **{p: str(int(matrix[i, j])) for j, p in enumerate(class_names)})
            for i, a in enumerate(class_names)]
    write_csv(path, rows, ("actual",) + tuple(class_names))


# -- figures ---------------------------------------------------------------------

def plot_roc(path, scores, labels, title=""):
    """ROC curve with the 0.5-threshold operating point marked; ``None`` if undefined."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    try:
        points, op = roc_points(scores, labels)
        auc = binary_auc(scores, labels)
    except UndefinedMetricError:
        return None
    fpr, tpr = zip(*points)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, drawstyle="steps-post", label=f"AUC {auc:.3f}")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8)
    ax.plot(*op, "o", color="k", label="threshold 0.5")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def roc_inputs(rows):
    """``{name: (scores, labels)}`` for the binary tasks with known truth."""
    tasks = {"idh": ("gt_idh", "idh_mut", "mutated"),
             "codeletion": ("gt_codel", "codel_codel", "co-deleted")}
    out = {}
    for name, (gt, score, positive) in tasks.items():
        known = [r for r in rows if r.get(gt)]
        out[name] = ([float(r[score]) for r in known], [r[gt] == positive for r in known])
    lh = _lgg_hgg_rows(rows)
    out["lgg_hgg"] = ([float(r["hgg"]) for r in lh], [r["gt_lgg_hgg"] == "HGG" for r in lh])
    return out


def segmentation_row(case_id, report):
    return {"case_id": case_id, "dice": fmt(report["dice"]),
            "hausdorff_mm": fmt(report["hausdorff_mm"]),
            "volumetric_similarity": fmt(report["volumetric_similarity"])}


def plot_segmentation_boxplot(path, seg_rows):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    keys = ("dice", "volumetric_similarity")
    data = [[float(r[k]) for r in seg_rows if r.get(k)] for k in keys]
    if not any(data):
        return None
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(keys) + 1), ["DICE", "VS"])
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
