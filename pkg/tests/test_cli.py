import json

import numpy as np
import pytest
import yaml

from platelabel import cli
from platelabel.checkpoint import load_checkpoint, model_param_count, save_checkpoint
from platelabel.data import examples_to_arrays, load_manifest
from platelabel.metrics import mean_average_precision
from platelabel.report import validate_report
from platelabel.tensor import OPS

SYNTH = {"canvas": [16, 16], "num_labels": 4, "objects_per_image": [1, 2], "num_train": 16, "num_test": 8, "seed": 1}


def write_config(tmp_path, name="cfg.yaml", **overrides):
    cfg = {
        "encoder": "tiny",
        "decoder": "gap",
        "input_size": [16, 16],
        "batch_size": 8,
        "epochs": 2,
        "seed": 0,
        "encoder_stages": [[4, 2], [8, 2]],
        "schedule": {"warmup_iters": 2},
        "data": {"synthetic": dict(SYNTH)},
        "output": "run",
    }
    cfg.update(overrides)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    assert cli.main(["train", "--config", str(write_config(root)), "--quiet"]) == 0
    spec = root / "spec.yaml"
    spec.write_text(yaml.safe_dump(SYNTH))
    assert cli.main(["synth", "--spec", str(spec), "--out", str(root / "data")]) == 0
    return root


class TestTrain:
    def test_outputs(self, trained):
        run = trained / "run"
        rows = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [0, 1]
        assert all("train_loss" in r and "test_map" in r for r in rows)
        assert (run / "final.ckpt").exists() and (run / "best.ckpt").exists()

    def test_zero_epochs(self, tmp_path):
        assert cli.main(["train", "--config", str(write_config(tmp_path, epochs=0)), "--quiet"]) == 0
        assert (tmp_path / "run" / "train_log.jsonl").read_text() == ""
        clf, _ = load_checkpoint(tmp_path / "run" / "final.ckpt")
        assert clf.optimizer_.t == 0

    def test_group_overflow(self, tmp_path, capsys):
        path = write_config(tmp_path, decoder="mldecoder", mldecoder={"groups": 5})
        assert cli.main(["train", "--config", str(path)]) == 2
        assert "GroupOverflow" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        assert cli.main(["train", "--config", str(write_config(tmp_path, learning_rate=0.1))]) == 2

    def test_missing_data(self, tmp_path):
        path = write_config(tmp_path, data={"manifest": "nope.csv", "vocab": "nope.txt"})
        assert cli.main(["train", "--config", str(path)]) == 3

    def test_divergence(self, tmp_path, monkeypatch):
        from platelabel import estimator

        real = estimator.batch_loss
        monkeypatch.setattr(estimator, "batch_loss", lambda z, y, cfg: real(z, y, cfg) * float("nan"))
        assert cli.main(["train", "--config", str(write_config(tmp_path)), "--quiet"]) == 4

    def test_mldecoder_run(self, tmp_path):
        path = write_config(tmp_path, decoder="mldecoder", mldecoder={"groups": 2, "width": 8})
        assert cli.main(["train", "--config", str(path), "--quiet"]) == 0

    def test_feature_file_data(self, tmp_path, rng):
        from platelabel.encoder import write_external_features

        write_external_features(tmp_path / "train.fmap", rng.standard_normal((6, 2, 2, 4)).astype(np.float32))
        (tmp_path / "labels.txt").write_text("a\nb;a\nb\na\nb\na;b\n")
        (tmp_path / "vocab.txt").write_text("a\nb\n")
        data = {"features": {"train": "train.fmap", "train_labels": "labels.txt", "vocab": "vocab.txt"}}
        path = write_config(tmp_path, encoder="external", data=data, input_size=[2, 2])
        assert cli.main(["train", "--config", str(path), "--quiet"]) == 0


class TestDeterminism:
    def test_bitwise_identical_checkpoints(self, tmp_path):
        for name in ("a", "b"):
            (tmp_path / name).mkdir()
            cfg = write_config(tmp_path / name)
            assert cli.main(["train", "--config", str(cfg), "--quiet"]) == 0
        for f in ("final.ckpt", "best.ckpt", "train_log.jsonl"):
            assert (tmp_path / "a" / "run" / f).read_bytes() == (tmp_path / "b" / "run" / f).read_bytes()


class TestEval:
    def test_report(self, trained, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
        out = trained / "report.json"
        ckpt = trained / "run" / "final.ckpt"
        args = ["eval", "--checkpoint", str(ckpt), "--data", str(trained / "data" / "manifest.csv"), "--out", str(out)]
        assert cli.main(args) == 0
        report = json.loads(out.read_text())
        validate_report(report)
        assert report["created_at"] == "1970-01-01T00:00:00+00:00"
        assert report["params"]["total"] == model_param_count(ckpt)
        assert report["params"]["decoder"] == 8 * 4 + 4
        assert report["flops"]["decoder"] == 4 * 4 * 8 + 8 * 4

        clf, _ = load_checkpoint(ckpt)
        _, test, _ = load_manifest(trained / "data" / "manifest.csv", trained / "data" / "vocab.txt", input_size=(16, 16))
        X, Y = examples_to_arrays(test)
        assert report["map"] == mean_average_precision(clf.predict_proba(X), Y)
        assert report["num_samples"] == len(test)

    def test_macro_and_train_split(self, trained):
        out = trained / "macro.json"
        args = ["eval", "--checkpoint", str(trained / "run" / "final.ckpt"), "--data",
                str(trained / "data" / "manifest.csv"), "--out", str(out), "--split", "train", "--mode", "macro"]
        assert cli.main(args) == 0
        report = json.loads(out.read_text())
        assert report["mode"] == "macro" and report["num_samples"] == 16

    def test_bad_checkpoint(self, trained, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"junk")
        args = ["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(trained / "data" / "manifest.csv"),
                "--out", str(tmp_path / "r.json")]
        assert cli.main(args) == 5

    def test_missing_manifest(self, trained, tmp_path):
        args = ["eval", "--checkpoint", str(trained / "run" / "final.ckpt"), "--data", str(tmp_path / "none.csv"),
                "--out", str(tmp_path / "r.json")]
        assert cli.main(args) == 3


class TestPredict:
    @pytest.fixture
    def zero_model(self, trained, tmp_path):
        clf, config = load_checkpoint(trained / "run" / "final.ckpt")
        for name, p in clf.params_.items():
            if name.startswith("decoder."):
                p.data[...] = 0
        path = tmp_path / "zero.ckpt"
        save_checkpoint(path, clf)
        return path

    def image(self, trained):
        return str(next((trained / "data" / "images").glob("synth-train-*.png")))

    def test_zero_logits(self, trained, zero_model, capsys):
        assert cli.main(["predict", "--checkpoint", str(zero_model), "--image", self.image(trained), "--json"]) == 0
        rows = json.loads(capsys.readouterr().out)
        assert len(rows) == 4 and all(r["confidence"] == 0.5 and r["detected"] for r in rows)

    def test_unreachable_threshold(self, trained, capsys):
        args = ["predict", "--checkpoint", str(trained / "run" / "final.ckpt"), "--image", self.image(trained),
                "--threshold", "1.01", "--json"]
        assert cli.main(args) == 0
        assert not any(r["detected"] for r in json.loads(capsys.readouterr().out))

    def test_truth_marks(self, trained, zero_model, capsys):
        args = ["predict", "--checkpoint", str(zero_model), "--image", self.image(trained), "--truth", "disk_00"]
        assert cli.main(args) == 0
        out = capsys.readouterr().out
        assert "TP" in out and "FP" in out

    def test_missing_image(self, trained, tmp_path):
        args = ["predict", "--checkpoint", str(trained / "run" / "final.ckpt"), "--image", str(tmp_path / "no.png")]
        assert cli.main(args) == 3


class TestGradcheck:
    def test_passes(self, tmp_path, capsys):
        assert cli.main(["gradcheck", "--config", str(write_config(tmp_path)), "--seeds", "3"]) == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["passed"] and summary["results"]["constant"] == 0.0
        assert all(v < 1e-4 for v in summary["results"].values())

    def test_corrupted_backward_named(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setattr(type(OPS["sigmoid"]), "backward", lambda self, ctx, g: (g * ctx["y"],))
        assert cli.main(["gradcheck", "--config", str(write_config(tmp_path)), "--seeds", "2"]) == 6
        assert "sigmoid" in capsys.readouterr().err


def test_synth_bad_spec(tmp_path):
    (tmp_path / "s.yaml").write_text(yaml.safe_dump({"num_labels": 2, "objects_per_image": [1, 3]}))
    assert cli.main(["synth", "--spec", str(tmp_path / "s.yaml"), "--out", str(tmp_path / "o")]) == 2
