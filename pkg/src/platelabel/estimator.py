"""scikit-learn compatible multi-label image classifier."""

from __future__ import annotations

import logging
from math import ceil
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import AugmentConfig, iter_array_batches
from .decoder import (
    GapDecoderParams,
    MlDecoderParams,
    gap_decode,
    gap_macs,
    ml_decode,
    ml_decoder_macs,
    param_count,
)
from .encoder import FeatureMap, TinyEncoderConfig, encode, encoder_macs, init_encoder_params
from .errors import Divergence, ShapeMismatch
from .loss import AsymmetricLossConfig, batch_loss
from .metrics import ThresholdGrid, mean_average_precision
from .optim import AdamState, ScheduleConfig, adam_step, learning_rate_at
from .tensor import DTYPES, Tensor, backward, no_grad

logger = logging.getLogger(__name__)

ENCODERS = ("tiny", "external")
DECODERS = ("gap", "mldecoder")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


def check_images(X, dtype=np.float32, ensure_unit_range=True) -> np.ndarray:
    """Validate a (n, H, W, C) batch of images or feature maps."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_all_finite=True)
    if X.ndim != 4:
        raise ValueError(f"expected a 4-d (n, H, W, C) array, got shape {X.shape}")
    if ensure_unit_range and (X.min() < 0 or X.max() > 1):
        raise ValueError("image values must be normalised to [0, 1]")
    return X


def check_targets(Y, n_samples: int | None = None) -> np.ndarray:
    Y = check_array(Y, dtype=None, ensure_all_finite=True)
    if not np.all((Y == 0) | (Y == 1)):
        raise ValueError("targets must be a multi-hot 0/1 matrix")
    if n_samples is not None and Y.shape[0] != n_samples:
        raise ValueError(f"{n_samples} samples but {Y.shape[0]} target rows")
    return Y.astype(np.int8)


class MultiLabelImageClassifier(ClassifierMixin, BaseEstimator):
    """Encoder plus decoder head trained with the asymmetric multi-label loss.

    ``encoder="tiny"`` trains a small strided conv net on raw images in
    [0, 1]; ``encoder="external"`` skips it and treats ``X`` as precomputed
    feature maps. ``decoder`` picks the pooled linear head (``"gap"``) or
    the query-token group decoder (``"mldecoder"``).

    Training uses Adam with a linear warmup and cosine decay. When the run is
    shorter than ``warmup_iters``, the warmup is shortened to leave at least
    one decay step.
    """

    def __init__(
        self,
        encoder="tiny",
        decoder="gap",
        stages=((8, 2), (16, 2), (32, 2)),
        kernel_size=3,
        num_groups=None,
        embed_dim=32,
        ffn_dim=None,
        num_heads=1,
        num_layers=1,
        shared_readout=False,
        batch_size=32,
        epochs=50,
        peak_lr=1e-3,
        final_lr=1e-6,
        warmup_iters=200,
        gamma_plus=0.0,
        gamma_minus=5.0,
        loss_reduction="mean",
        augment=True,
        random_state=0,
        dtype="float32",
    ):
        self.encoder = encoder
        self.decoder = decoder
        self.stages = stages
        self.kernel_size = kernel_size
        self.num_groups = num_groups
        self.embed_dim = embed_dim
        self.ffn_dim = ffn_dim
        self.num_heads = num_heads
        self.num_layers = num_layers
        self.shared_readout = shared_readout
        self.batch_size = batch_size
        self.epochs = epochs
        self.peak_lr = peak_lr
        self.final_lr = final_lr
        self.warmup_iters = warmup_iters
        self.gamma_plus = gamma_plus
        self.gamma_minus = gamma_minus
        self.loss_reduction = loss_reduction
        self.augment = augment
        self.random_state = random_state
        self.dtype = dtype

    # -- construction ------------------------------------------------------
    def _np_dtype(self):
        return DTYPES[self.dtype]

    def _encoder_config(self, input_shape) -> TinyEncoderConfig:
        return TinyEncoderConfig(stages=[tuple(s) for s in self.stages], kernel_size=self.kernel_size, input_size=tuple(input_shape))

    def _feature_shape(self, input_shape) -> tuple[int, int, int]:
        if self.encoder == "external":
            return tuple(input_shape)
        return self._encoder_config(input_shape).output_shape

    def _build(self, input_shape, n_labels: int, rng: np.random.Generator) -> dict[str, Tensor]:
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        dt = self._np_dtype()
        params: dict[str, Tensor] = {}
        if self.encoder == "tiny":
            params.update(init_encoder_params(self._encoder_config(input_shape), rng, dtype=dt))
        depth = self._feature_shape(input_shape)[2]
        if self.decoder == "gap":
            params.update(GapDecoderParams.init(depth, n_labels, rng, dtype=dt).named())
        else:
            head = MlDecoderParams.init(
                depth, n_labels, rng,
                num_groups=self.num_groups, width=self.embed_dim, ffn_dim=self.ffn_dim,
                num_heads=self.num_heads, num_layers=self.num_layers,
                shared_readout=self.shared_readout, dtype=dt,
            )
            params.update(head.named())
        return params

    def _head(self, params):
        named = {k: v for k, v in params.items() if k.startswith("decoder.")}
        if self.decoder == "gap":
            return GapDecoderParams.from_named(named)
        return MlDecoderParams.from_named(named, self.n_labels_, self.num_heads)

    def _features(self, x: Tensor, params) -> FeatureMap:
        if self.encoder == "external":
            return FeatureMap(x)
        return encode(x, self._encoder_config(self.input_shape_), params)

    def _logits(self, x: Tensor, params) -> Tensor:
        F = self._features(x, params)
        head = self._head(params)
        return gap_decode(F, head) if self.decoder == "gap" else ml_decode(F, head)

    def _schedule(self, total_iters: int) -> ScheduleConfig | None:
        if total_iters < 2:
            return None
        warmup = min(self.warmup_iters, total_iters - 1)
        return ScheduleConfig(total_iters=total_iters, peak_lr=self.peak_lr, final_lr=self.final_lr, warmup_iters=warmup)

    # -- fitting -----------------------------------------------------------
    def fit(self, X, Y, eval_set=None, callback: Callable[[dict], None] | None = None, label_names=None):
        """Train from scratch.

        ``eval_set=(X_test, Y_test)`` adds a per-epoch held-out mAP to
        ``history_`` and keeps the best-scoring weights in ``best_params_``.
        ``callback`` receives each epoch's history row as it is produced.
        """
        dt = self._np_dtype()
        X = check_images(X, dtype=dt, ensure_unit_range=self.encoder == "tiny")
        Y = check_targets(Y, len(X))
        if eval_set is not None:
            X_eval = check_images(eval_set[0], dtype=dt, ensure_unit_range=self.encoder == "tiny")
            Y_eval = check_targets(eval_set[1], len(X_eval))
            if X_eval.shape[1:] != X.shape[1:] or Y_eval.shape[1] != Y.shape[1]:
                raise ShapeMismatch("eval_set shapes do not match the training data")

        self.input_shape_ = tuple(int(v) for v in X.shape[1:])
        self.n_labels_ = int(Y.shape[1])
        self.label_names_ = list(label_names) if label_names is not None else [str(i) for i in range(self.n_labels_)]
        rng = np.random.default_rng(self.random_state)
        self.params_ = self._build(self.input_shape_, self.n_labels_, rng)
        self.optimizer_ = AdamState()
        self.history_ = []
        self.best_params_ = None
        self.best_score_ = None
        self.best_epoch_ = None

        loss_cfg = AsymmetricLossConfig(self.gamma_plus, self.gamma_minus, self.loss_reduction)
        aug = AugmentConfig() if (self.augment and self.encoder == "tiny") else None
        batches_per_epoch = ceil(len(X) / self.batch_size)
        total_iters = batches_per_epoch * self.epochs
        self.total_iters_ = total_iters
        schedule = self._schedule(total_iters)

        it = 0
        for epoch in range(self.epochs):
            loss_sum = 0.0
            lr = self.peak_lr
            for xb, yb in iter_array_batches(X, Y, self.batch_size, self.random_state, epoch, aug):
                lr = learning_rate_at(it, schedule) if schedule is not None else self.peak_lr
                logits = self._logits(Tensor(xb), self.params_)
                loss = batch_loss(logits, yb, loss_cfg)
                value = loss.item()
                if not np.isfinite(value):
                    raise Divergence(f"loss became {value} at iteration {it} (epoch {epoch})")
                backward(loss)
                grads = {name: p.grad for name, p in self.params_.items() if p.grad is not None}
                adam_step(self.params_, grads, self.optimizer_, lr)
                for p in self.params_.values():
                    p.zero_grad()
                loss_sum += value * (len(xb) if self.loss_reduction == "mean" else 1.0)
                it += 1
            row = {
                "epoch": epoch,
                "train_loss": loss_sum / len(X) if self.loss_reduction == "mean" else loss_sum,
                "lr": lr,
                "iterations": it,
            }
            if eval_set is not None:
                score = self.score(X_eval, Y_eval)
                row["test_map"] = score
                if self.best_score_ is None or score > self.best_score_:
                    self.best_score_ = score
                    self.best_epoch_ = epoch
                    self.best_params_ = {k: v.data.copy() for k, v in self.params_.items()}
            self.history_.append(row)
            logger.info("epoch %d loss %.6f%s", epoch, row["train_loss"],
                        f" test mAP {row['test_map']:.4f}" if "test_map" in row else "")
            if callback is not None:
                callback(row)
        return self

    # -- inference ---------------------------------------------------------
    def _check_input(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, dtype=self._np_dtype(), ensure_unit_range=self.encoder == "tiny")
        if X.shape[1:] != self.input_shape_:
            raise ShapeMismatch(f"expected inputs of shape {self.input_shape_}, got {X.shape[1:]}")
        return X

    def decision_function(self, X, batch_size: int = 64) -> np.ndarray:
        """Raw logits, shape (n, K)."""
        X = self._check_input(X)
        out = []
        with no_grad():
            for start in range(0, len(X), batch_size):
                out.append(self._logits(Tensor(X[start : start + batch_size]), self.params_).data)
        return np.concatenate(out, axis=0)

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.decision_function(X).astype(np.float64))

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.int8)

    def score(self, X, Y, sample_weight=None) -> float:
        """Micro-averaged thresholded mAP over all (sample, label) pairs."""
        Y = check_targets(Y)
        return mean_average_precision(self.predict_proba(X), Y, ThresholdGrid(500))

    def encode(self, X) -> np.ndarray:
        """Feature maps (n, H, W, D) from the trained encoder."""
        X = self._check_input(X)
        with no_grad():
            return self._features(Tensor(X), self.params_).values.data

    # -- bookkeeping -------------------------------------------------------
    def param_counts(self) -> dict[str, int]:
        check_is_fitted(self, "params_")
        enc = param_count({k: v for k, v in self.params_.items() if k.startswith("encoder.")})
        dec = param_count({k: v for k, v in self.params_.items() if k.startswith("decoder.")})
        return {"encoder": enc, "decoder": dec, "total": enc + dec}

    def macs(self) -> dict[str, int]:
        """Analytic multiply-adds for one inference."""
        check_is_fitted(self, "params_")
        enc = encoder_macs(self._encoder_config(self.input_shape_)) if self.encoder == "tiny" else 0
        h, w, d = self._feature_shape(self.input_shape_)
        if self.decoder == "gap":
            dec = gap_macs(h, w, d, self.n_labels_)
        else:
            dec = ml_decoder_macs(h, w, d, self._head(self.params_))
        return {"encoder": enc, "decoder": dec, "total": enc + dec}

    def use_best_params(self):
        """Swap in the weights of the best held-out epoch, if any were recorded."""
        check_is_fitted(self, "params_")
        if self.best_params_ is not None:
            for name, arr in self.best_params_.items():
                self.params_[name].data = arr.copy()
        return self
