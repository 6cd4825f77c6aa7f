"""Acceptance gate: one recorded PASS/FAIL line per criterion, at its stated tolerance."""

import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import yaml
from threadpoolctl import threadpool_limits

from conftest import record_acceptance
from platelabel import cli
from platelabel.loss import AsymmetricLossConfig, batch_loss, per_label_loss
from platelabel.metrics import PredictionSet, average_precision, mean_average_precision
from platelabel.optim import ScheduleConfig, learning_rate_at
from platelabel.report import validate_report
from platelabel.tensor import Tensor
from test_loss import bce_oracle
from test_metrics import brute_force_ap, rank_ap

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def check(name, passed, detail):
    record_acceptance(name, bool(passed), detail)
    print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    assert passed, detail


def stage_config(src: Path, workdir: Path) -> Path:
    """Copy a shipped config into ``workdir`` so its run lands there."""
    workdir.mkdir(parents=True, exist_ok=True)
    raw = yaml.safe_load(src.read_text())
    raw["output"] = "run"
    path = workdir / src.name
    path.write_text(yaml.safe_dump(raw))
    return path


def train(config: Path) -> float:
    start = time.perf_counter()
    with threadpool_limits(1):
        code = cli.main(["train", "--config", str(config), "--quiet"])
    assert code == 0
    return time.perf_counter() - start


@pytest.fixture(scope="module")
def synth_manifest(tmp_path_factory):
    """The acceptance dataset rendered to PNGs, for evaluation through the CLI."""
    root = tmp_path_factory.mktemp("synth")
    spec = yaml.safe_load((CONFIGS / "synthetic_gap.yaml").read_text())["data"]["synthetic"]
    (root / "spec.yaml").write_text(yaml.safe_dump(spec))
    assert cli.main(["synth", "--spec", str(root / "spec.yaml"), "--out", str(root / "data")]) == 0
    return root / "data" / "manifest.csv"


def evaluate(ckpt: Path, manifest: Path, split: str, out: Path) -> dict:
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(manifest), "--out", str(out), "--split", split]) == 0
    return json.loads(out.read_text())


@pytest.fixture(scope="module")
def gap_run(tmp_path_factory):
    work = tmp_path_factory.mktemp("gap")
    seconds = train(stage_config(CONFIGS / "synthetic_gap.yaml", work))
    return work / "run", seconds


def test_gradient_correctness(tmp_path, capsys):
    start = time.perf_counter()
    code = cli.main(["gradcheck", "--config", str(stage_config(CONFIGS / "synthetic_mldecoder.yaml", tmp_path)), "--seeds", "20"])
    seconds = time.perf_counter() - start
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    worst = max(summary["results"].values())
    components = {"loss", "gap_decoder", "ml_decoder", "tiny_encoder"} <= set(summary["results"])
    check(
        "gradient correctness",
        code == 0 and worst < 1e-4 and components and summary["seeds"] >= 20 and seconds < 120,
        f"{len(summary['results'])} probes x 20 seeds, worst rel err {worst:.2e} (< 1e-4), {seconds:.1f}s (< 120s)",
    )


def test_loss_values():
    a = per_label_loss(0.0, 1)
    b = per_label_loss(0.0, 0, AsymmetricLossConfig(gamma_minus=5))
    plain = AsymmetricLossConfig(0.0, 0.0)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        bsz, k = rng.integers(1, 9, size=2)
        z = rng.uniform(-10, 10, (bsz, k))
        y = rng.integers(0, 2, (bsz, k))
        worst = max(worst, abs(batch_loss(Tensor(z), y, plain).item() - bce_oracle(z, y)))
    check(
        "loss values",
        abs(a - 0.693147) < 1e-6 and abs(b - 0.021661) < 1e-6 and worst < 1e-6,
        f"(y=1,z=0) {a:.6f}, (y=0,z=0) {b:.6f}, BCE oracle max gap {worst:.1e} over 100 instances",
    )


def test_metric_oracle():
    rng = np.random.default_rng(99)
    exact = 0
    for _ in range(100):
        bsz, k = rng.integers(1, 9), rng.integers(1, 7)
        scores = rng.random((bsz, k))
        snap = rng.random((bsz, k)) < 0.25
        scores[snap] = rng.integers(0, 500, snap.sum()) / 499
        labels = rng.integers(0, 2, (bsz, k))
        labels.flat[rng.integers(labels.size)] = 1
        exact += mean_average_precision(scores, labels) == brute_force_ap(scores.ravel(), labels.ravel())
    rank_gap = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 60))
        cells = np.sort(rng.choice(np.arange(0, 499, 2), size=n, replace=False))
        scores = (cells + rng.uniform(0.01, 0.99, n)) / 499
        labels = rng.integers(0, 2, n)
        labels[rng.integers(n)] = 1
        assert np.all(np.diff(scores) > 1 / 499)
        rank_gap = max(rank_gap, abs(average_precision(PredictionSet(scores, labels)) - rank_ap(scores, labels)))
    worked = average_precision(PredictionSet([0.9, 0.8, 0.1], [0, 1, 1]))
    check(
        "metric oracle",
        exact == 100 and rank_gap < 1e-12 and abs(worked - 0.583333) < 1e-6 and abs(worked - (0.25 + 1 / 3)) < 1e-9,
        f"brute-force exact {exact}/100, rank-AP max gap {rank_gap:.1e}, worked example {worked:.9f}",
    )


def test_schedule():
    cfg = ScheduleConfig(total_iters=1600)
    got = [learning_rate_at(it, cfg) for it in (99, 199, 1599)]
    errs = [abs(g - e) for g, e in zip(got, (5e-4, 1e-3, 1e-6))]
    check("schedule", max(errs) < 1e-12, f"lr(99)={got[0]:.3e} lr(199)={got[1]:.3e} lr(last)={got[2]:.3e}, max err {max(errs):.1e}")


@pytest.mark.slow
def test_overfit_gap(gap_run, synth_manifest, tmp_path):
    run, seconds = gap_run
    train_map = evaluate(run / "final.ckpt", synth_manifest, "train", tmp_path / "train.json")["map"]
    test_map = evaluate(run / "final.ckpt", synth_manifest, "test", tmp_path / "test.json")["map"]
    epochs = len((run / "train_log.jsonl").read_text().splitlines())
    check(
        "overfit GAP",
        train_map >= 0.95 and test_map >= 0.85 and epochs <= 50 and seconds < 600,
        f"train mAP {train_map:.4f} (>= 0.95), test mAP {test_map:.4f} (>= 0.85), {epochs} epochs, {seconds:.0f}s (< 600s)",
    )


@pytest.mark.slow
def test_overfit_mldecoder(tmp_path, synth_manifest):
    seconds = train(stage_config(CONFIGS / "synthetic_mldecoder.yaml", tmp_path))
    report = evaluate(tmp_path / "run" / "final.ckpt", synth_manifest, "train", tmp_path / "train.json")
    groups = report["config"]["estimator"]["num_groups"], report["config"]["estimator"]["embed_dim"]
    check(
        "overfit ML-Decoder",
        report["map"] >= 0.90 and groups == (2, 32) and seconds < 900,
        f"G=2 d=32, train mAP {report['map']:.4f} (>= 0.90), {seconds:.0f}s (< 900s)",
    )


@pytest.mark.slow
def test_report_protocol(gap_run, synth_manifest, tmp_path):
    run, _ = gap_run
    report = evaluate(run / "final.ckpt", synth_manifest, "test", tmp_path / "r.json")
    validate_report(report)
    columns = {"map", "flops", "params"} <= set(report)
    check(
        "benchmark report",
        columns and report["params"]["decoder"] == 264 and report["flops"]["decoder"] == 2304,
        f"mAP {report['map']:.4f}, ops {report['flops']['total']} (decoder {report['flops']['decoder']}), "
        f"params {report['params']['total']} (decoder {report['params']['decoder']})",
    )


@pytest.mark.slow
def test_determinism(gap_run, tmp_path):
    run, _ = gap_run
    train(stage_config(CONFIGS / "synthetic_gap.yaml", tmp_path))
    same = all((run / f).read_bytes() == (tmp_path / "run" / f).read_bytes() for f in ("final.ckpt", "best.ckpt"))
    check("determinism", same, "final and best checkpoints of two seeded runs are " + ("bitwise identical" if same else "different"))


def test_asymmetry():
    worst = 0.0
    for i in range(1, 10):
        p = i / 10
        z = math.log(p / (1 - p))
        ratio = per_label_loss(z, 0, AsymmetricLossConfig(gamma_minus=5)) / per_label_loss(z, 0, AsymmetricLossConfig(gamma_minus=0))
        worst = max(worst, abs(ratio - p**5))
    check("asymmetry", worst < 1e-9, f"max |ratio - p^5| over p in 0.1..0.9 = {worst:.1e}")
