import json

import numpy as np
from jsonschema import validate

from volrep.report import SUMMARY_SCHEMA, emit_report, to_jsonable


def _sections():
    rng = np.random.default_rng(0)
    return {
        "npr": {0: {"positive_rate": 0.2, "mean_all": 1.5, "mean_positive": 3.2, "n_positive": 6},
                1: {"positive_rate": 0.0, "mean_all": None, "mean_positive": None, "n_positive": 0}},
        "auc_matrix": {"auc": np.array([[0.9, np.nan], [0.4, 0.8]]), "correlation": np.eye(2), "order": [1, 0]},
        "priority": {"losses": {"cross_entropy": {"confusion": np.eye(3, dtype=int) * 4}}, "best": "cross_entropy"},
        "fairness": {"tests": [{"task": 0, "attribute": "sex", "disparity": 0.1, "p_value": 0.4, "p_corrected": 0.5}]},
        "acceptance": {"retrieval_top5": 0.7, "npr_min": 2.5},
        "skewness": {"positives_per_study": float(rng.random())},
    }


def test_emit_report_files_schema_and_idempotence(tmp_path):
    overlays = [{"title": "s0", "image": np.ones((8, 8)), "weights": np.eye(8), "mask": np.eye(8)}]
    curves = {"loss": {"series": {"a": ([1, 2, 3], [3.0, 2.0, 1.0])}, "ylabel": "loss"}}
    first = emit_report(_sections(), tmp_path / "a", overlays, curves)
    second = emit_report(_sections(), tmp_path / "b", overlays, curves)
    validate(first, SUMMARY_SCHEMA)
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    for name in first["figures"] + first["tables"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert "npr.png" in first["figures"] and "lime_overlays.png" in first["figures"]
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["sections"]["acceptance"] == {"retrieval_top5": 0.7, "npr_min": 2.5}
    assert summary["sections"]["auc_matrix"]["auc"][0][1] is None


def test_to_jsonable():
    out = to_jsonable({1: (np.float32(0.5), np.int64(3), float("inf")), "b": np.array([True, False])})
    assert out == {"1": [0.5, 3, None], "b": [True, False]}
