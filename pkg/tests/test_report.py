import jsonschema
import numpy as np
import pytest

from platelabel.report import build_report, timestamp, validate_report

FLOPS = {"encoder": 10, "decoder": 2, "total": 12}
PARAMS = {"encoder": 5, "decoder": 3, "total": 8}


def test_build_and_validate(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "86400")
    scores = np.array([[0.9, 0.2, 0.3], [0.1, 0.8, 0.6]])
    labels = np.array([[1, 0, 0], [0, 1, 0]])
    report = build_report(scores, labels, ["a", "b", "c"], FLOPS, PARAMS, {"k": 1})
    assert report["map"] == 1.0  # both positives outrank every negative
    assert report["per_label_ap"][2] == {"label": "c", "ap": None, "positives": 0}
    assert report["created_at"] == "1970-01-02T00:00:00+00:00"
    assert report["thresholds"] == {"count": 500, "min": 0.0, "max": 1.0}


def test_timestamp_unpinned(monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    assert timestamp().endswith("+00:00")


def test_schema_rejects_missing_columns():
    with pytest.raises(jsonschema.ValidationError):
        validate_report({"map": 0.5})
