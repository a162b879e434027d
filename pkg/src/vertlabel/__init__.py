"""Vertebra localization and identification with integral regression.

A small reverse-mode autodiff engine (:mod:`vertlabel.autograd`) drives a 3D
residual encoder-decoder whose heatmaps become coordinates through a
differentiable soft-argmax, next to a Bi-LSTM multi-label classifier.
"""
from .data import (CLASS_NAMES, LabelSet, PhantomSpec, Volume, generate_phantom, preprocess,
                   read_labels, read_volume, resample_isotropic, write_labels, write_volume)
from .evaluation import (identification_metrics, mean_average_precision, predict_scan,
                         read_predictions, write_predictions)
from .experiment import DeskData, DeskSetup, run_ablation, train_setup
from .integral import hard_argmax, soft_argmax
from .losses import CropTarget, LossConfig
from .nn import Model, ModelConfig, model_forward
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "CLASS_NAMES", "LabelSet", "PhantomSpec", "Volume", "generate_phantom", "preprocess",
    "read_labels", "read_volume", "resample_isotropic", "write_labels", "write_volume",
    "identification_metrics", "mean_average_precision", "predict_scan", "read_predictions",
    "write_predictions",
    "DeskData", "DeskSetup", "run_ablation", "train_setup",
    "hard_argmax", "soft_argmax",
    "CropTarget", "LossConfig",
    "Model", "ModelConfig", "model_forward",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
