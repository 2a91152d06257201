import json

import numpy as np

from glioma_mtl.data_model import index_labelset
from glioma_mtl.postprocess import build_prediction_record
from glioma_mtl.reporting import (NA, confusion_tables, metrics_report, read_csv,
                                  write_metrics_json, write_predictions)


def _records():
    g = np.random.default_rng(0)
    recs, truths = [], {}
    for i in range(12):
        idh, grade = i % 2, i % 3
        p = float(np.clip(0.5 + (0.3 if idh else -0.3) + g.normal(0, 0.1), 0.01, 0.99))
        gs = np.full(3, 0.1)
        gs[grade] = 0.8
        recs.append(build_prediction_record(f"c{i:02d}", [1 - p, p], [0.6, 0.4], gs))
        # codeletion is never known
        truths[f"c{i:02d}"] = index_labelset(idh, None, grade)
    return recs, truths


def test_predictions_csv_round_trip(tmp_path):
    recs, truths = _records()
    rows = write_predictions(tmp_path / "p.csv", recs, truths)
    back, cols = read_csv(tmp_path / "p.csv")
    assert back == [{c: r.get(c, "") for c in cols} for r in rows]
    assert cols[0] == "case_id" and cols[-1] == "gt_who_subtype"
    assert back[0]["gt_codel"] == "" and back[0]["gt_who_subtype"] == ""


def test_all_unknown_task_reports_na(tmp_path):
    recs, truths = _records()
    rows = write_predictions(tmp_path / "p.csv", recs, truths)
    report = metrics_report(rows)
    assert report["all"]["codeletion"] == {"n": 0, "auc": NA, "accuracy": NA,
                                           "sensitivity": NA, "specificity": NA}
    assert report["all"]["idh"]["auc"] == 1.0
    assert report["all"]["grade"]["accuracy"] == 1.0
    assert report["LGG"]["idh"]["n"] + report["HGG"]["idh"]["n"] == 12
    assert report["all"]["segmentation"]["dice"] == NA
    write_metrics_json(tmp_path / "m.json", report)
    assert json.loads((tmp_path / "m.json").read_text()) == report


def test_confusion_tables_count_known_cases(tmp_path):
    recs, truths = _records()
    rows = write_predictions(tmp_path / "p.csv", recs, truths)
    tables = confusion_tables(rows)
    assert tables["idh"][1].sum() == 12
    assert tables["codeletion"][1].sum() == 0
    assert np.trace(tables["grade"][1]) == 12
