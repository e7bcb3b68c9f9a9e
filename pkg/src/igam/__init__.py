"""Input gradient adversarial matching on a small numpy autodiff engine.

Modules:
    autodiff    reverse-mode tape with higher-order gradients
    nn          layers, presets, SGD and checkpoints
    losses      cross-entropy, input gradients, L_adv and L_diff
    transforms  affine input adapters between student and teacher shapes
    attacks     FGSM / PGD and adversarial training
    trainer     teacher finetuning, IGAM training and baselines
    metrics     robustness reports, alignment, saliency export, landscapes
    data, rng, config, cli
"""

from . import attacks, autodiff, data, losses, metrics, nn, rng, trainer, transforms
from .attacks import AttackConfig, fgsm, pgd
from .data import Dataset, load_idx, synth_dataset
from .trainer import IGAMTrainer, TrainConfig, train_igam

__version__ = "0.1.0"
