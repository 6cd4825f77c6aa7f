from pathlib import Path

import pytest

from platelabel.config import load_config, parse_config
from platelabel.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
BASE = {"data": {"synthetic": {"num_labels": 8}}, "output": "out"}


@pytest.mark.parametrize("name", ["synthetic_gap.yaml", "synthetic_mldecoder.yaml"])
def test_shipped_configs_parse(name):
    cfg = load_config(CONFIGS / name)
    params = cfg.estimator_params()
    assert params["batch_size"] == 8 and params["epochs"] == 50
    assert cfg.resolve(cfg.output).resolve().parent == CONFIGS.parent / "runs"


def test_string_numbers_are_coerced():
    cfg = parse_config({**BASE, "schedule": {"peak_lr": "1e-3", "warmup_iters": "10"}})
    assert cfg.schedule == {"peak_lr": 1e-3, "warmup_iters": 10}


@pytest.mark.parametrize(
    "patch",
    [
        {"learning_rate": 1},
        {"schedule": {"peak": 1}},
        {"batch_size": 0},
        {"batch_size": 2.5},
        {"decoder": "transformer"},
        {"input_size": [64]},
        {"data": {}},
        {"data": {"synthetic": {}, "manifest": "m.csv", "vocab": "v.txt"}},
        {"data": {"manifest": "m.csv"}},
        {"encoder": "external"},
        {"schedule": {"peak_lr": 1e-6, "final_lr": 1e-3}},
        {"decoder": "mldecoder", "num_labels": 4, "mldecoder": {"groups": 5}},
    ],
)
def test_rejected(patch):
    with pytest.raises(ConfigError):
        parse_config({**BASE, **patch})


def test_missing_required():
    with pytest.raises(ConfigError):
        parse_config({"data": BASE["data"]})


def test_bad_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("data: [unclosed")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")
