"""Training configuration files (YAML mappings, unknown keys rejected)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

_SCHEDULE_KEYS = {"peak_lr", "final_lr", "warmup_iters"}
_LOSS_KEYS = {"gamma_plus", "gamma_minus", "batch_reduction"}
_MLDECODER_KEYS = {"groups", "width", "ffn_dim", "heads", "layers", "shared_readout"}
_SYNTH_KEYS = {"canvas", "num_labels", "glyph_table", "objects_per_image", "num_train", "num_test", "seed"}
_DATA_KEYS = {"synthetic", "manifest", "vocab", "features"}
_FEATURE_KEYS = {"train", "test", "train_labels", "test_labels", "vocab"}


@dataclass
class TrainConfig:
    data: dict
    output: str
    encoder: str = "tiny"
    decoder: str = "gap"
    input_size: tuple[int, int] = (64, 64)
    num_labels: int | None = None
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    augment: bool = True
    dtype: str = "float32"
    encoder_stages: list = field(default_factory=lambda: [[8, 2], [16, 2], [32, 2]])
    kernel_size: int = 3
    mldecoder: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    base_dir: str = field(default=".", repr=False)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def echo(self) -> dict:
        out = asdict(self)
        out.pop("base_dir")
        out["input_size"] = list(self.input_size)
        return out

    def estimator_params(self) -> dict[str, Any]:
        ml = self.mldecoder
        sched = self.schedule
        loss = self.loss
        return dict(
            encoder=self.encoder,
            decoder=self.decoder,
            stages=tuple(tuple(s) for s in self.encoder_stages),
            kernel_size=self.kernel_size,
            num_groups=ml.get("groups"),
            embed_dim=ml.get("width", 32),
            ffn_dim=ml.get("ffn_dim"),
            num_heads=ml.get("heads", 1),
            num_layers=ml.get("layers", 1),
            shared_readout=ml.get("shared_readout", False),
            batch_size=self.batch_size,
            epochs=self.epochs,
            peak_lr=sched.get("peak_lr", 1e-3),
            final_lr=sched.get("final_lr", 1e-6),
            warmup_iters=sched.get("warmup_iters", 200),
            gamma_plus=loss.get("gamma_plus", 0.0),
            gamma_minus=loss.get("gamma_minus", 5.0),
            loss_reduction=loss.get("batch_reduction", "mean"),
            augment=self.augment,
            random_state=self.seed,
            dtype=self.dtype,
        )


def _reject_unknown(section: str, got: dict, allowed: set) -> None:
    if not isinstance(got, dict):
        raise ConfigError(f"{section} must be a mapping")
    unknown = sorted(set(got) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _num(section: str, key: str, value, kind=float, minimum=None):
    # YAML 1.1 reads "1e-3" as a string, so numbers are coerced explicitly
    try:
        out = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key} must be a {kind.__name__}, got {value!r}") from None
    if kind is int and isinstance(value, float) and value != out:
        raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
    if minimum is not None and out < minimum:
        raise ConfigError(f"{section}.{key} must be >= {minimum}, got {value!r}")
    return out


def parse_config(raw: dict, base_dir=".") -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    allowed = {f for f in TrainConfig.__dataclass_fields__ if f != "base_dir"}
    _reject_unknown("config", raw, allowed)
    for key in ("data", "output"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    cfg = dict(raw)

    if cfg.get("encoder", "tiny") not in ("tiny", "external"):
        raise ConfigError(f"encoder must be 'tiny' or 'external', got {cfg['encoder']!r}")
    if cfg.get("decoder", "gap") not in ("gap", "mldecoder"):
        raise ConfigError(f"decoder must be 'gap' or 'mldecoder', got {cfg['decoder']!r}")
    if cfg.get("dtype", "float32") not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {cfg['dtype']!r}")
    if not isinstance(cfg.get("augment", True), bool):
        raise ConfigError("augment must be true or false")

    size = cfg.get("input_size", [64, 64])
    if not isinstance(size, (list, tuple)) or len(size) != 2:
        raise ConfigError("input_size must be [height, width]")
    cfg["input_size"] = tuple(_num("config", "input_size", v, int, 1) for v in size)
    for key, minimum in (("batch_size", 1), ("epochs", 0), ("seed", 0), ("kernel_size", 1)):
        if key in cfg:
            cfg[key] = _num("config", key, cfg[key], int, minimum)
    if cfg.get("num_labels") is not None:
        cfg["num_labels"] = _num("config", "num_labels", cfg["num_labels"], int, 1)

    stages = cfg.get("encoder_stages", [[8, 2], [16, 2], [32, 2]])
    if not isinstance(stages, list) or not stages or not all(isinstance(s, (list, tuple)) and len(s) == 2 for s in stages):
        raise ConfigError("encoder_stages must be a non-empty list of [channels, stride] pairs")
    cfg["encoder_stages"] = [[_num("encoder_stages", "channels", c, int, 1), _num("encoder_stages", "stride", s, int, 1)] for c, s in stages]

    sched = cfg.get("schedule") or {}
    _reject_unknown("schedule", sched, _SCHEDULE_KEYS)
    sched = {k: _num("schedule", k, v, int if k == "warmup_iters" else float, 0) for k, v in sched.items()}
    cfg["schedule"] = sched
    if not 0 < sched.get("final_lr", 1e-6) <= sched.get("peak_lr", 1e-3):
        raise ConfigError("schedule needs 0 < final_lr <= peak_lr")
    if sched.get("warmup_iters", 200) < 1:
        raise ConfigError("schedule.warmup_iters must be >= 1")

    loss = cfg.get("loss") or {}
    _reject_unknown("loss", loss, _LOSS_KEYS)
    loss = dict(loss)
    for k in ("gamma_plus", "gamma_minus"):
        if k in loss:
            loss[k] = _num("loss", k, loss[k], float, 0)
    if loss.get("batch_reduction", "mean") not in ("mean", "sum"):
        raise ConfigError("loss.batch_reduction must be mean or sum")
    cfg["loss"] = loss

    ml = cfg.get("mldecoder") or {}
    _reject_unknown("mldecoder", ml, _MLDECODER_KEYS)
    ml = dict(ml)
    for k in ("groups", "width", "ffn_dim", "heads", "layers"):
        if ml.get(k) is not None:
            ml[k] = _num("mldecoder", k, ml[k], int, 1)
    if "shared_readout" in ml and not isinstance(ml["shared_readout"], bool):
        raise ConfigError("mldecoder.shared_readout must be true or false")
    cfg["mldecoder"] = ml

    data = cfg["data"]
    _reject_unknown("data", data, _DATA_KEYS)
    kinds = [k for k in ("synthetic", "manifest", "features") if k in data]
    if len(kinds) != 1:
        raise ConfigError("data must name exactly one of synthetic, manifest, features")
    if "synthetic" in data:
        _reject_unknown("data.synthetic", data["synthetic"], _SYNTH_KEYS)
    if "manifest" in data and "vocab" not in data:
        raise ConfigError("data.manifest needs data.vocab")
    if "features" in data:
        _reject_unknown("data.features", data["features"], _FEATURE_KEYS)
        missing = sorted(_FEATURE_KEYS - {"test", "test_labels"} - set(data["features"]))
        if missing:
            raise ConfigError(f"data.features lacks {', '.join(missing)}")
        if cfg.get("encoder", "tiny") != "external":
            raise ConfigError("precomputed features need encoder: external")
    elif cfg.get("encoder") == "external":
        raise ConfigError("encoder: external needs data.features")

    out = TrainConfig(**cfg, base_dir=str(base_dir))
    groups = ml.get("groups")
    if out.decoder == "mldecoder" and groups is not None and out.num_labels is not None and groups > out.num_labels:
        raise ConfigError(f"GroupOverflow: {groups} query groups exceed {out.num_labels} labels")
    return out


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return parse_config(raw, base_dir=path.parent)
