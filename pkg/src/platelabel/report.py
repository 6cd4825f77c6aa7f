"""Evaluation reports: mAP, per-label AP, analytic compute and parameter counts."""

from __future__ import annotations

import datetime as _dt
import json
import os
from pathlib import Path

import jsonschema
import numpy as np

from .metrics import ThresholdGrid, mean_average_precision, per_label_average_precision

_COUNTS = {
    "type": "object",
    "required": ["encoder", "decoder", "total"],
    "properties": {k: {"type": "integer", "minimum": 0} for k in ("encoder", "decoder", "total")},
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["map", "mode", "thresholds", "per_label_ap", "flops", "params", "num_samples", "config", "created_at"],
    "properties": {
        "map": {"type": "number", "minimum": 0, "maximum": 1},
        "mode": {"enum": ["micro", "macro"]},
        "thresholds": {
            "type": "object",
            "required": ["count", "min", "max"],
            "properties": {"count": {"type": "integer", "minimum": 2}, "min": {"const": 0.0}, "max": {"const": 1.0}},
        },
        "per_label_ap": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["label", "ap", "positives"],
                "properties": {
                    "label": {"type": "string"},
                    "ap": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "positives": {"type": "integer", "minimum": 0},
                },
            },
        },
        "flops": _COUNTS,
        "params": _COUNTS,
        "num_samples": {"type": "integer", "minimum": 1},
        "config": {"type": "object"},
        "created_at": {"type": "string"},
    },
}


def timestamp() -> str:
    """UTC ISO-8601 time; ``SOURCE_DATE_EPOCH`` pins it for reproducible files."""
    pinned = os.environ.get("SOURCE_DATE_EPOCH")
    when = _dt.datetime.fromtimestamp(int(pinned), _dt.timezone.utc) if pinned else _dt.datetime.now(_dt.timezone.utc)
    return when.replace(microsecond=0).isoformat()


def build_report(scores, labels, label_names, flops: dict, params: dict, config: dict, mode: str = "micro",
                 grid: ThresholdGrid = ThresholdGrid()) -> dict:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    per_label = per_label_average_precision(scores, labels, grid)
    positives = labels.sum(axis=0).astype(int).tolist()
    report = {
        "map": mean_average_precision(scores, labels, grid, mode=mode),
        "mode": mode,
        "thresholds": {"count": grid.count, "min": 0.0, "max": 1.0},
        "per_label_ap": [
            {"label": str(name), "ap": ap, "positives": pos}
            for name, ap, pos in zip(label_names, per_label, positives)
        ],
        "flops": {k: int(v) for k, v in flops.items()},
        "params": {k: int(v) for k, v in params.items()},
        "num_samples": int(scores.shape[0]),
        "config": config,
        "created_at": timestamp(),
    }
    validate_report(report)
    return report


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
