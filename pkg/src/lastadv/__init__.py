"""Adversarial training on a small numpy autodiff engine, with a proxy-guided
update rule that uses the previous parameters to correct each step."""

__version__ = "0.1.0"

from .attack import AttackConfig, craft_perturbation, fgsm, pgd
from .data import Dataset, batch_iter, load_cifar_binary, load_idx, synth_blobs
from .evaluator import (input_gradient_map, landscape_grid, robust_accuracy, standard_accuracy,
                        transfer_matrix)
from .net import Checkpoint, NetworkSpec, ParamVector, init_params, load_checkpoint, save_checkpoint
from .objective import SDConfig, cross_entropy, kl_temperature, sd_loss
from .trainer import Scheduler, TrainConfig, cauchy_harness, train

__all__ = [
    "AttackConfig", "Checkpoint", "Dataset", "NetworkSpec", "ParamVector", "SDConfig", "Scheduler",
    "TrainConfig", "batch_iter", "cauchy_harness", "craft_perturbation", "cross_entropy", "fgsm",
    "init_params", "input_gradient_map", "kl_temperature", "landscape_grid", "load_checkpoint",
    "load_cifar_binary", "load_idx", "pgd", "robust_accuracy", "save_checkpoint", "sd_loss",
    "standard_accuracy", "synth_blobs", "train", "transfer_matrix",
]
