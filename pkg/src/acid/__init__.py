"""Amortized conditional independence testing with a dataset-level transformer."""

from .calibration import NullDistribution, calibrate, decide, fit_skew_normal, p_value
from .evaluation import auc, folded_eval, partial_correlation_test
from .model import ACID, ModelConfig
from .synthgen import ConfigSpace, Dataset, DatasetStream, GenConfig, generate
from .trainer import TrainConfig, Trainer, finetune, predict, train

__all__ = [
    "ACID", "ConfigSpace", "Dataset", "DatasetStream", "GenConfig", "ModelConfig", "NullDistribution",
    "TrainConfig", "Trainer", "auc", "calibrate", "decide", "finetune", "fit_skew_normal", "folded_eval",
    "generate", "p_value", "partial_correlation_test", "predict", "train",
]
