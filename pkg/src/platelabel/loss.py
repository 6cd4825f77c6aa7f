"""Asymmetric multi-label loss over independent sigmoid outputs.

For a label with logit ``z`` and probability ``p = sigmoid(z)``:

    positive (y = 1):  -(1 - p) ** gamma_plus  * log(p)
    negative (y = 0):  -p ** gamma_minus       * log(1 - p)

Per-sample losses sum over labels; the batch is then reduced by mean or sum.
``log p`` and ``log(1 - p)`` are computed as ``-softplus(-z)`` and
``-softplus(z)`` so logits of magnitude 30 and beyond stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonBinaryTarget, NonFinite, ShapeMismatch
from .tensor import Tensor


@dataclass(frozen=True)
class AsymmetricLossConfig:
    gamma_plus: float = 0.0
    gamma_minus: float = 5.0
    batch_reduction: str = "mean"

    def __post_init__(self):
        if self.gamma_plus < 0 or self.gamma_minus < 0:
            raise ValueError("focusing parameters must be non-negative")
        if self.batch_reduction not in ("mean", "sum"):
            raise ValueError(f"batch_reduction must be 'mean' or 'sum', got {self.batch_reduction!r}")


def _log_sigmoid(z: float) -> float:
    return -(max(-z, 0.0) + math.log1p(math.exp(-abs(z))))


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def per_label_loss(z: float, y: int, cfg: AsymmetricLossConfig = AsymmetricLossConfig()) -> float:
    """Loss of a single logit against a binary target, as a Python float."""
    z = float(z)
    if not math.isfinite(z):
        raise NonFinite(f"logit {z} is not finite")
    if y == 1:
        return -((1.0 - _sigmoid(z)) ** cfg.gamma_plus) * _log_sigmoid(z)
    if y == 0:
        return -(_sigmoid(z) ** cfg.gamma_minus) * _log_sigmoid(-z)
    raise NonBinaryTarget(f"target must be 0 or 1, got {y!r}")


def batch_loss(logits: Tensor, targets, cfg: AsymmetricLossConfig = AsymmetricLossConfig()) -> Tensor:
    """Scalar loss of a (B, K) logit batch against multi-hot (B, K) targets."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if logits.ndim != 2 or y.shape != logits.shape:
        raise ShapeMismatch(f"logits {logits.shape} and targets {y.shape} must both be (B, K)")
    if not np.all((y == 0) | (y == 1)):
        raise NonBinaryTarget("targets must be multi-hot (0/1)")
    y = y.astype(logits.dtype)
    pos, neg = Tensor(y), Tensor(1 - y)

    log_p = logits.log_sigmoid()
    log_not_p = (-logits).log_sigmoid()
    pos_term = log_p
    if cfg.gamma_plus:
        pos_term = (-logits).sigmoid() ** cfg.gamma_plus * pos_term
    neg_term = log_not_p
    if cfg.gamma_minus:
        neg_term = logits.sigmoid() ** cfg.gamma_minus * neg_term
    per_sample = -(pos * pos_term + neg * neg_term).sum(axes=1)
    if cfg.batch_reduction == "mean":
        return per_sample.mean()
    return per_sample.sum()
