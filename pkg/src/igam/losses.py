"""Classification, input-gradient adversarial and matching losses.

Input gradients are per-sample: ``J`` is the gradient of the *summed*
cross-entropy, so each row is the gradient of that sample's own loss and does
not shrink with batch size. Every other reduction over the batch is a mean.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG4 = math.log(4.0)


class BothZero(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_diff: float = 10.0

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_diff"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def one_hot(labels, k):
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _targets(y, k):
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if y.ndim == 1:
        return one_hot(y, k)
    if y.shape[1] != k:
        raise ad.ShapeMismatch(f"labels have {y.shape[1]} classes, logits {k}")
    return y


def xent_from_logits(logits, y, reduction="mean"):
    y = Tensor(_targets(y, logits.shape[1]))
    if y.shape[0] != logits.shape[0]:
        raise ad.ShapeMismatch(f"{y.shape[0]} labels for {logits.shape[0]} samples")
    per_sample = ad.neg(ad.sum_(y * ad.log_softmax(logits, axis=1), axis=1))
    if reduction == "none":
        return per_sample
    total = ad.sum_(per_sample)
    return total if reduction == "sum" else total * (1.0 / logits.shape[0])


def xent(model, x, y, transform=None, reduction="mean"):
    """Cross-entropy of ``model`` on ``x`` (optionally through an input transform).

    ``y`` may be one-hot rows or integer labels.
    """
    x = ad.as_tensor(x)
    if transform is not None:
        x = transform.apply(x)
    return xent_from_logits(model.logits(x), y, reduction=reduction)


def loss_and_input_gradient(model, x, y, create_graph=False, transform=None):
    """Return ``(mean xent, J)`` where ``J = d(sum xent)/dx`` has the shape of ``x``.

    ``x`` may be an array; a fresh leaf that requires grad is created for it.
    """
    if not (isinstance(x, Tensor) and x.requires_grad):
        x = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    total = xent(model, x, y, transform=transform, reduction="sum")
    J = ad.grad(total, x, create_graph=create_graph)
    return total * (1.0 / x.shape[0]), J


def input_gradient(model, x, y, create_graph=False, transform=None):
    return loss_and_input_gradient(model, x, y, create_graph=create_graph, transform=transform)[1]


def standardize(J):
    """Per-sample zero-mean, unit-RMS rescaling (differentiable)."""
    axes = tuple(range(1, J.ndim))
    centered = J - ad.mean(J, axis=axes, keepdims=True)
    rms = ad.sqrt(ad.mean(ad.square(centered), axis=axes, keepdims=True) + 1e-12)
    return centered / rms


def disc_logits(disc, J, standardize_J=False):
    return disc.logits(standardize(J) if standardize_J else J)


def loss_adv(disc, J_t, J_s, standardize_J=False, non_saturating=False):
    """Batch-mean ``log D(J_t) + log(1 - D(J_s))`` in log-sigmoid form.

    With ``non_saturating`` the student term becomes ``-log D(J_s)``; only
    the student update should use that variant.
    """
    a_t = disc_logits(disc, J_t, standardize_J)
    a_s = disc_logits(disc, J_s, standardize_J)
    teacher_term = ad.mean(ad.log_sigmoid(a_t))
    if non_saturating:
        student_term = ad.neg(ad.mean(ad.log_sigmoid(a_s)))
    else:
        student_term = ad.mean(ad.log_sigmoid(ad.neg(a_s)))
    return teacher_term + student_term


def loss_diff(J_s, J_t):
    """Batch-mean of per-sample squared l2 distance."""
    J_s, J_t = ad.as_tensor(J_s), ad.as_tensor(J_t)
    if J_s.shape != J_t.shape:
        raise ad.ShapeMismatch(f"{J_s.shape} vs {J_t.shape}")
    d = ad.flatten(J_s - J_t)
    return ad.mean(ad.sum_(ad.square(d), axis=1))


@dataclass
class StudentTerms:
    total: Tensor
    xent: Tensor
    adv: Tensor
    diff: Tensor
    J_s: Tensor


def student_terms(student, disc, x, y, weights, J_t, disc_view=None,
                  standardize_J=False, non_saturating=False):
    """Build the student objective ``xent + lambda_adv*L_adv + lambda_diff*L_diff``.

    ``J_t`` is a constant target. ``disc_view`` maps a J batch to what the
    discriminator sees (e.g. a crop); it applies to both J's. A zero weight
    leaves its term out of ``total`` entirely.
    """
    l_xent, J_s = loss_and_input_gradient(student, x, y, create_graph=True)
    J_t = Tensor(J_t.data if isinstance(J_t, Tensor) else J_t)
    view = disc_view or (lambda J: J)
    total = l_xent
    adv = diff = None
    if weights.lambda_adv > 0:
        adv = loss_adv(disc, view(J_t), view(J_s), standardize_J, non_saturating)
        total = total + weights.lambda_adv * adv
    if weights.lambda_diff > 0:
        diff = loss_diff(J_s, J_t)
        total = total + weights.lambda_diff * diff
    if adv is None:
        with ad.no_grad():
            adv = loss_adv(disc, view(J_t), view(J_s.detach()), standardize_J, non_saturating)
    if diff is None:
        diff = loss_diff(J_s.detach(), J_t)
    return StudentTerms(total, l_xent, adv, diff, J_s)


def student_objective(student, disc, x, y, weights, J_t, **kwargs):
    return student_terms(student, disc, x, y, weights, J_t, **kwargs).total


# ---------------------------------------------------------------- GAN optimum

def optimal_discriminator_oracle(p_teacher, p_student):
    """Bayes-optimal discriminator output ``p_t / (p_t + p_s)``."""
    p_t = np.asarray(p_teacher, dtype=np.float64)
    p_s = np.asarray(p_student, dtype=np.float64)
    if np.any(p_t < 0) or np.any(p_s < 0):
        raise ValueError("masses must be non-negative")
    if np.any(p_t + p_s == 0):
        raise BothZero("both masses are zero")
    out = p_t / (p_t + p_s)
    return float(out) if out.ndim == 0 else out


def adv_loss_expectation(p_teacher, p_student, disc_values):
    """Exact ``E_t[log D] + E_s[log(1 - D)]`` over a finite support."""
    p_t = np.asarray(p_teacher, dtype=np.float64)
    p_s = np.asarray(p_student, dtype=np.float64)
    d = np.asarray(disc_values, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p_t > 0, p_t * np.log(np.where(p_t > 0, d, 1.0)), 0.0)
        s = np.where(p_s > 0, p_s * np.log(np.where(p_s > 0, 1.0 - d, 1.0)), 0.0)
    return float(t.sum() + s.sum())


def js_divergence(p, q):
    """Jensen-Shannon divergence (natural log) between two pmfs."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)
