"""Checkpoint archive: a JSON config echo followed by named TNSR records.

Layout (little-endian)::

    b"PLCK"  u32 version  u32 n_json  <n_json bytes of UTF-8 JSON>
    u32 n_tensors
    repeated: u32 n_name  <name bytes>  <TNSR record>

Model weights are stored as ``model.<name>``; Adam moments as
``optim.m.<name>`` / ``optim.v.<name>`` and the step counter as ``optim.step``.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, CheckpointError, TruncatedFile
from .estimator import MultiLabelImageClassifier
from .optim import AdamState
from .tensor import Tensor, read_tensor, write_tensor

MAGIC = b"PLCK"
VERSION = 1


def write_archive(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    fp = io.BytesIO(data)

    def take(n):
        chunk = fp.read(n)
        if len(chunk) != n:
            raise TruncatedFile(f"{path}: checkpoint is truncated")
        return chunk

    if take(4) != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint")
    version, n_json = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config = json.loads(take(n_json).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<I", take(4))
        name = take(n_name).decode("utf-8")
        tensors[name] = read_tensor(fp)
    return config, tensors


def save_checkpoint(path, clf: MultiLabelImageClassifier, params: dict[str, np.ndarray] | None = None, extra: dict | None = None) -> None:
    """Write a fitted classifier; ``params`` overrides the weights (e.g. best epoch)."""
    weights = params if params is not None else {k: v.data for k, v in clf.params_.items()}
    config = {
        "estimator": _jsonable(clf.get_params()),
        "fitted": {
            "input_shape": list(clf.input_shape_),
            "n_labels": clf.n_labels_,
            "label_names": list(clf.label_names_),
        },
    }
    if extra:
        config.update(_jsonable(extra))
    tensors = {f"model.{k}": np.asarray(v) for k, v in weights.items()}
    state = clf.optimizer_
    for name in weights:
        if name in state.m:
            tensors[f"optim.m.{name}"] = state.m[name]
            tensors[f"optim.v.{name}"] = state.v[name]
    tensors["optim.step"] = np.array([state.t], dtype=np.float64)
    write_archive(path, config, tensors)


def load_checkpoint(path) -> tuple[MultiLabelImageClassifier, dict]:
    """Rebuild a fitted classifier (and its optimizer state) from disk."""
    config, tensors = read_archive(path)
    try:
        est_params = dict(config["estimator"])
        fitted = config["fitted"]
    except KeyError as exc:
        raise CheckpointError(f"{path}: config echo lacks {exc}") from None
    if est_params.get("stages") is not None:
        est_params["stages"] = tuple(tuple(s) for s in est_params["stages"])
    clf = MultiLabelImageClassifier(**est_params)
    clf.input_shape_ = tuple(fitted["input_shape"])
    clf.n_labels_ = int(fitted["n_labels"])
    clf.label_names_ = list(fitted["label_names"])
    expected = clf._build(clf.input_shape_, clf.n_labels_, np.random.default_rng(0))
    model = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    if set(model) != set(expected):
        raise CheckpointError(f"{path}: tensor names do not match the configured architecture")
    for name, tensor in expected.items():
        if model[name].shape != tensor.shape:
            raise CheckpointError(f"{path}: {name} has shape {model[name].shape}, architecture expects {tensor.shape}")
        tensor.data = model[name].astype(tensor.dtype)
    clf.params_ = expected
    state = AdamState(t=int(tensors.get("optim.step", np.zeros(1))[0]))
    for name in expected:
        if f"optim.m.{name}" in tensors:
            state.m[name] = tensors[f"optim.m.{name}"].copy()
            state.v[name] = tensors[f"optim.v.{name}"].copy()
    clf.optimizer_ = state
    clf.history_ = []
    clf.best_params_ = None
    clf.best_score_ = None
    return clf, config


def model_param_count(path) -> int:
    _, tensors = read_archive(path)
    return int(sum(v.size for k, v in tensors.items() if k.startswith("model.")))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Tensor):
        raise TypeError("tensors do not belong in the config echo")
    return obj
