"""Command-line entry point: train, eval, predict, gradcheck, synth.

Exit codes: 0 ok, 2 config, 3 data, 4 divergence, 5 checkpoint, 6 gradcheck.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as ckpt
from .config import TrainConfig, load_config
from .data import (
    LabelVocabulary,
    SyntheticSpec,
    examples_to_arrays,
    generate_synthetic,
    load_manifest,
    read_png,
    resize_bilinear,
    write_manifest,
)
from .encoder import load_external_features
from .errors import (
    BadMagic,
    CheckpointError,
    ConfigError,
    DataError,
    DimOverflow,
    Divergence,
    GroupOverflow,
    InvalidSpec,
    NoPositives,
    ShapeMismatch,
    TruncatedFile,
)
from .estimator import MultiLabelImageClassifier
from .gradcheck import run_gradcheck
from .loss import AsymmetricLossConfig
from .report import build_report, write_report

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_GRADCHECK = 0, 2, 3, 4, 5, 6

log = logging.getLogger("platelabel")


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# data loading shared by train and eval
# ---------------------------------------------------------------------------


def _read_label_lines(path, vocab: LabelVocabulary) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return np.stack([vocab.encode([p.strip() for p in line.split(";") if p.strip()]) for line in lines])


def _load_features_with_labels(features_path, labels_path, vocab: LabelVocabulary):
    X = load_external_features(features_path).values.data
    Y = _read_label_lines(labels_path, vocab)
    if len(Y) != len(X):
        raise DataError(f"{features_path} holds {len(X)} feature maps but {labels_path} has {len(Y)} label rows")
    return X, Y


def load_training_data(cfg: TrainConfig):
    """Returns (X_train, Y_train, X_test or None, Y_test or None, vocab)."""
    data = cfg.data
    size = tuple(cfg.input_size)
    if "synthetic" in data:
        spec_fields = dict(data["synthetic"])
        spec_fields.setdefault("canvas", list(size))
        spec = SyntheticSpec(**spec_fields)
        train, test, vocab = generate_synthetic(spec)
        if tuple(spec.canvas) != size:
            for ex in train + test:
                ex.image = np.clip(resize_bilinear(ex.image, size), 0, 1).astype(np.float32)
    elif "manifest" in data:
        train, test, vocab = load_manifest(cfg.resolve(data["manifest"]), cfg.resolve(data["vocab"]), input_size=size)
    else:
        feats = data["features"]
        vocab = LabelVocabulary.load(cfg.resolve(feats["vocab"]))
        X, Y = _load_features_with_labels(cfg.resolve(feats["train"]), cfg.resolve(feats["train_labels"]), vocab)
        Xt = Yt = None
        if "test" in feats:
            Xt, Yt = _load_features_with_labels(cfg.resolve(feats["test"]), cfg.resolve(feats["test_labels"]), vocab)
        return X, Y, Xt, Yt, vocab
    if not train:
        raise DataError("training split is empty")
    X, Y = examples_to_arrays(train)
    Xt, Yt = examples_to_arrays(test) if test else (None, None)
    return X, Y, Xt, Yt, vocab


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from exc
    try:
        X, Y, Xt, Yt, vocab = load_training_data(cfg)
    except (DataError, InvalidSpec, BadMagic, TruncatedFile, DimOverflow, OSError) as exc:
        raise CommandError(EXIT_DATA, f"data error: {exc}") from exc
    if cfg.num_labels is not None and cfg.num_labels != len(vocab):
        raise CommandError(EXIT_CONFIG, f"num_labels is {cfg.num_labels} but the vocabulary has {len(vocab)} labels")
    groups = cfg.mldecoder.get("groups")
    if cfg.decoder == "mldecoder" and groups is not None and groups > len(vocab):
        raise CommandError(EXIT_CONFIG, f"GroupOverflow: {groups} query groups exceed {len(vocab)} labels")

    out_dir = cfg.resolve(cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    clf = MultiLabelImageClassifier(**cfg.estimator_params())
    eval_set = (Xt, Yt) if Xt is not None and len(Xt) and Yt.any() else None

    with log_path.open("w", encoding="utf-8") as log_fh:
        def on_epoch(row):
            log_fh.write(json.dumps(row, sort_keys=True) + "\n")
            log_fh.flush()
            if not args.quiet:
                extra = f"  test mAP {row['test_map']:.4f}" if "test_map" in row else ""
                print(f"epoch {row['epoch'] + 1}/{cfg.epochs}  loss {row['train_loss']:.5f}{extra}", flush=True)

        try:
            clf.fit(X, Y, eval_set=eval_set, callback=on_epoch, label_names=vocab.labels)
        except Divergence as exc:
            raise CommandError(EXIT_DIVERGED, f"training diverged: {exc}") from exc
        except GroupOverflow as exc:
            raise CommandError(EXIT_CONFIG, f"GroupOverflow: {exc}") from exc
        except ShapeMismatch as exc:
            raise CommandError(EXIT_CONFIG, f"configuration does not fit the data: {exc}") from exc

    extra = {"train_config": cfg.echo()}
    final_path = out_dir / "final.ckpt"
    ckpt.save_checkpoint(final_path, clf, extra=extra)
    written = {"final": str(final_path), "log": str(log_path)}
    if clf.best_params_ is not None:
        best_path = out_dir / "best.ckpt"
        ckpt.save_checkpoint(best_path, clf, params=clf.best_params_,
                             extra={**extra, "best_epoch": clf.best_epoch_, "best_test_map": clf.best_score_})
        written["best"] = str(best_path)
    print(json.dumps({"status": "ok", "epochs": cfg.epochs, "iterations": clf.total_iters_, **written}, sort_keys=True))
    return EXIT_OK


def _load_ckpt(path):
    try:
        return ckpt.load_checkpoint(path)
    except (CheckpointError, BadMagic, TruncatedFile, ValueError, KeyError, TypeError) as exc:
        raise CommandError(EXIT_CHECKPOINT, f"checkpoint error: {exc}") from exc


def _eval_arrays(clf: MultiLabelImageClassifier, args):
    vocab = LabelVocabulary(clf.label_names_)
    data = Path(args.data)
    try:
        if data.suffix.lower() == ".fmap":
            if not args.labels:
                raise DataError("evaluating feature files needs --labels")
            return _load_features_with_labels(data, args.labels, vocab)
        train, test, _ = load_manifest(data, vocab=vocab, input_size=clf.input_shape_[:2] if clf.encoder == "tiny" else None)
    except (DataError, BadMagic, TruncatedFile, DimOverflow, OSError) as exc:
        raise CommandError(EXIT_DATA, f"data error: {exc}") from exc
    chosen = {"train": train, "test": test, "all": train + test}[args.split]
    if not chosen:
        raise CommandError(EXIT_DATA, f"the {args.split} split is empty")
    return examples_to_arrays(chosen)


def cmd_eval(args) -> int:
    clf, meta = _load_ckpt(args.checkpoint)
    X, Y = _eval_arrays(clf, args)
    if tuple(X.shape[1:]) != tuple(clf.input_shape_):
        raise CommandError(EXIT_CHECKPOINT, f"data shape {X.shape[1:]} does not match checkpoint input {clf.input_shape_}")
    scores = clf.predict_proba(X)
    try:
        report = build_report(scores, Y, clf.label_names_, clf.macs(), clf.param_counts(), meta, mode=args.mode)
    except NoPositives as exc:
        raise CommandError(EXIT_DATA, f"data error: {exc}") from exc
    write_report(args.out, report)
    print(f"mAP {report['map']:.4f} on {report['num_samples']} samples  "
          f"ops {report['flops']['total']:,}  params {report['params']['total']:,}  -> {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    clf, _ = _load_ckpt(args.checkpoint)
    try:
        if Path(args.image).suffix.lower() == ".fmap":
            x = load_external_features(args.image).values.data[:1]
        else:
            img = read_png(args.image)
            x = np.clip(resize_bilinear(img, clf.input_shape_[:2]), 0, 1)[None].astype(np.float32)
    except (DataError, BadMagic, TruncatedFile, DimOverflow, OSError) as exc:
        raise CommandError(EXIT_DATA, f"image error: {exc}") from exc
    if tuple(x.shape[1:]) != tuple(clf.input_shape_):
        raise CommandError(EXIT_CHECKPOINT, f"input shape {x.shape[1:]} does not match checkpoint input {clf.input_shape_}")
    probs = clf.predict_proba(x)[0]
    truth = None
    if args.truth is not None:
        truth = {t.strip() for t in args.truth.split(";") if t.strip()}
        unknown = truth - set(clf.label_names_)
        if unknown:
            raise CommandError(EXIT_DATA, f"unknown ground-truth label(s): {', '.join(sorted(unknown))}")
    rows = []
    for k in np.argsort(-probs, kind="stable"):
        name, p = clf.label_names_[k], float(probs[k])
        row = {"label": name, "confidence": p, "detected": p >= args.threshold}
        if truth is not None and row["detected"]:
            row["outcome"] = "TP" if name in truth else "FP"
        rows.append(row)
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        for row in rows:
            mark = "detected" if row["detected"] else ""
            print(f"{row['label']:<24} {row['confidence']:.4f}  {mark:<8} {row.get('outcome', '')}".rstrip())
    return EXIT_OK


def _labels_hint(cfg: TrainConfig) -> int:
    if cfg.num_labels is not None:
        return cfg.num_labels
    data = cfg.data
    if "synthetic" in data:
        return int(data["synthetic"].get("num_labels", 8))
    vocab = data.get("vocab") or data.get("features", {}).get("vocab")
    try:
        return len(LabelVocabulary.load(cfg.resolve(vocab)))
    except (OSError, DataError):
        return 8


def cmd_gradcheck(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from exc
    k = _labels_hint(cfg)
    groups = cfg.mldecoder.get("groups")
    if groups is not None and groups > k:
        raise CommandError(EXIT_CONFIG, f"GroupOverflow: {groups} query groups exceed {k} labels")
    loss_cfg = AsymmetricLossConfig(
        cfg.loss.get("gamma_plus", 0.0), cfg.loss.get("gamma_minus", 5.0), cfg.loss.get("batch_reduction", "mean")
    )
    results = run_gradcheck(
        seeds=args.seeds,
        num_labels=k,
        groups=groups,
        stages=[tuple(s) for s in cfg.encoder_stages],
        kernel_size=cfg.kernel_size,
        loss_cfg=loss_cfg,
    )
    for r in results:
        print(f"{r.name:<20} max rel err {r.max_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    summary = {
        "passed": not failed,
        "seeds": args.seeds,
        "tolerance": results[0].tolerance if results else None,
        "results": {r.name: r.max_error for r in results},
        "failed": failed,
    }
    print(json.dumps(summary, sort_keys=True))
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        raw = yaml.safe_load(Path(args.spec).read_text(encoding="utf-8")) or {}
        spec = SyntheticSpec(**raw)
    except (OSError, yaml.YAMLError, TypeError, InvalidSpec) as exc:
        raise CommandError(EXIT_CONFIG, f"bad synthetic spec: {exc}") from exc
    train, test, vocab = generate_synthetic(spec)
    manifest, vocab_path = write_manifest(args.out, train, test, vocab)
    print(json.dumps({"manifest": str(manifest), "vocab": str(vocab_path), "train": len(train), "test": len(test)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="platelabel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a JSON report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest CSV, or an FMAP file together with --labels")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--labels", help="label file (one ';'-separated row per feature map) for FMAP data")
    p.add_argument("--mode", choices=("micro", "macro"), default="micro")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="list per-label confidences for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--truth", help="';'-separated ground-truth labels")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="compare backprop against finite differences")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="render a synthetic dataset (PNGs + manifest + vocab)")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
