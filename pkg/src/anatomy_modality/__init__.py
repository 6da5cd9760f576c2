"""Factorised anatomy/modality representation learning for cardiac images."""

from .checkpoint import load_model, save_model
from .factor_model import FactorModel, ModelConfig, NumericFailure, binarize, film_modulate, sample_posterior
from .objectives import LossReport, LossWeights, adversarial_losses, dice_loss, kl_loss, total_loss
from .phantom import PhantomConfig, generate_dataset, make_split, sample_semi_supervised
from .training import TrainConfig, TrainingData, finetune_multitask, fit

__all__ = [
    "FactorModel",
    "LossReport",
    "LossWeights",
    "ModelConfig",
    "NumericFailure",
    "PhantomConfig",
    "TrainConfig",
    "TrainingData",
    "adversarial_losses",
    "binarize",
    "dice_loss",
    "film_modulate",
    "finetune_multitask",
    "fit",
    "generate_dataset",
    "kl_loss",
    "load_model",
    "make_split",
    "sample_posterior",
    "sample_semi_supervised",
    "save_model",
    "total_loss",
]
