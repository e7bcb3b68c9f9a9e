"""l-infinity FGSM / PGD attacks, the robustness predicate and PGD adversarial training.

PGD here ascends the loss, as the inner maximization of adversarial training
requires. The perturbation ``delta`` is kept inside the epsilon ball by
clipping after every step, and the attacked image is ``clip(x + delta, 0, 1)``.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import minibatches
from .losses import xent


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 1
    eta: float = None
    random_start: bool = False
    norm: str = "linf"

    def __post_init__(self):
        if not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.eta is None:
            object.__setattr__(self, "eta", self.epsilon / 4 if self.epsilon > 0 else 1.0)
        if self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.norm != "linf":
            raise ValueError("only the linf norm is supported")


def _loss_grad_fn(model, y, transform=None):
    def loss_grad(x_adv):
        x = Tensor(x_adv, requires_grad=True)
        return ad.grad(xent(model, x, y, transform=transform, reduction="sum"), x).data
    return loss_grad


def sign_ascent(loss_grad, x, cfg, rng=None, clip=(0.0, 1.0), callback=None):
    """Projected sign-gradient ascent from ``x``.

    Args:
        loss_grad: maps a perturbed input array to d(loss)/d(input).
        x: clean input array.
        cfg: :class:`AttackConfig`.
        rng: numpy Generator, required when ``cfg.random_start``.
        clip: valid pixel range, or None for an unconstrained domain.
        callback: called with ``delta`` after every iterate.

    Returns:
        the perturbed input.
    """
    x = np.asarray(x, dtype=np.float64)
    eps = cfg.epsilon
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        delta = rng.uniform(-eps, eps, size=x.shape)
    else:
        delta = np.zeros_like(x)

    def perturbed(d):
        return x + d if clip is None else np.clip(x + d, clip[0], clip[1])

    for _ in range(cfg.steps):
        g = loss_grad(perturbed(delta))
        delta = np.clip(delta + cfg.eta * np.sign(g), -eps, eps)
        if callback is not None:
            callback(delta)
    return perturbed(delta)


def fgsm(model, x, y, epsilon, transform=None):
    x = np.asarray(x, dtype=np.float64)
    g = _loss_grad_fn(model, y, transform)(x)
    return np.clip(x + epsilon * np.sign(g), 0.0, 1.0)


def pgd(model, x, y, cfg, rng=None, transform=None, callback=None):
    return sign_ascent(_loss_grad_fn(model, y, transform), x, cfg, rng=rng, callback=callback)


def attack(model, x, y, cfg, rng=None, transform=None):
    """FGSM when ``cfg`` is a single saturating step, PGD otherwise."""
    if cfg.steps == 1 and not cfg.random_start and cfg.eta >= cfg.epsilon:
        return fgsm(model, x, y, cfg.epsilon, transform=transform)
    return pgd(model, x, y, cfg, rng=rng, transform=transform)


def is_robust_at(model, x, x_adv):
    """Per-sample: does the predicted class survive the perturbation?

    Ties in the logits go to the lowest class index on both sides.
    """
    return model.predict(x) == model.predict(x_adv)


def adversarial_train_epoch(model, dataset, cfg, optimizer, batch_size, shuffle_rng, attack_rng=None):
    """One epoch of PGD adversarial training; returns the mean adversarial loss.

    With ``cfg.epsilon == 0`` every batch is unperturbed, reproducing a
    standard training epoch.
    """
    params = optimizer.params
    losses = []
    for idx in minibatches(len(dataset), batch_size, shuffle_rng):
        xb, yb = dataset.images[idx], dataset.labels[idx]
        if cfg.epsilon > 0:
            xb = pgd(model, xb, yb, cfg, rng=attack_rng)
        loss = xent(model, xb, yb)
        optimizer.step(ad.grad(loss, params))
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")
