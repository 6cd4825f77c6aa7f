"""Multi-label image classification from scratch: encoder, decoding heads, asymmetric loss, thresholded mAP."""

from .decoder import GapDecoderParams, MlDecoderParams, cross_attention, gap_decode, ml_decode
from .encoder import FeatureMap, TinyEncoderConfig, encode, load_external_features, write_external_features
from .estimator import MultiLabelImageClassifier
from .loss import AsymmetricLossConfig, batch_loss, per_label_loss
from .metrics import PredictionSet, ThresholdGrid, average_precision, mean_average_precision, precision_recall_at
from .optim import AdamState, ScheduleConfig, adam_step, learning_rate_at
from .tensor import Tensor, backward, finite_difference_check, forward, no_grad

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AsymmetricLossConfig",
    "FeatureMap",
    "GapDecoderParams",
    "MlDecoderParams",
    "MultiLabelImageClassifier",
    "PredictionSet",
    "ScheduleConfig",
    "Tensor",
    "ThresholdGrid",
    "TinyEncoderConfig",
    "adam_step",
    "average_precision",
    "backward",
    "batch_loss",
    "cross_attention",
    "encode",
    "finite_difference_check",
    "forward",
    "gap_decode",
    "learning_rate_at",
    "load_external_features",
    "mean_average_precision",
    "ml_decode",
    "no_grad",
    "per_label_loss",
    "precision_recall_at",
    "write_external_features",
]
