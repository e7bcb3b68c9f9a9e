"""Teacher finetuning, IGAM student training, baselines and the experiment runner."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses, nn, transforms
from .attacks import AttackConfig, adversarial_train_epoch
from .data import minibatches
from .rng import streams

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 50.0


class TeacherMutated(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_teacher: float = 0.05
    lr_student: float = 0.01
    lr_disc: float = 0.01
    momentum: float = 0.9
    lambda_adv: float = 1.0
    lambda_diff: float = 10.0
    disc_update_period: int = 5
    finetune_epochs: int = 1
    igam_epochs: int = 10
    batch_size: int = 50
    seed: int = 0
    transform: dict = field(default_factory=lambda: {"kind": "identity"})
    non_saturating: bool = False
    standardize_J: bool = False
    student_preset: str = "small-cnn"
    disc_preset: str = "disc-cnn-4"

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self):
        errors = []
        for name in ("lr_teacher", "lr_student", "lr_disc"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be positive")
        for name in ("lambda_adv", "lambda_diff"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                errors.append(f"{name} must be finite and non-negative")
        for name in ("disc_update_period", "batch_size"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        for name in ("finetune_epochs", "igam_epochs"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        return errors

    @property
    def weights(self):
        return losses.LossWeights(self.lambda_adv, self.lambda_diff)


# ---------------------------------------------------------------- run log

LOG_FIELDS = ("step", "l_xent", "l_adv", "l_diff", "disc_acc", "cos_sim")


class RunLog:
    """Per-step training scalars; ``skipped`` lists steps dropped by the divergence guard."""

    def __init__(self):
        self.records = []
        self.skipped = []

    def append(self, **row):
        if self.records and row["step"] <= self.records[-1]["step"]:
            raise ValueError("step index must increase")
        self.records.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.records])

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            for r in self.records:
                w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                out.append(step=int(row["step"]), **{k: float(row[k]) for k in LOG_FIELDS[1:]})
        return out


def mean_cosine(a, b):
    """Mean per-sample cosine similarity between two gradient batches."""
    a = np.asarray(a).reshape(len(a), -1)
    b = np.asarray(b).reshape(len(b), -1)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        return 0.0
    return float(np.mean(np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])))


# ---------------------------------------------------------------- adapted teacher

class AdaptedModel:
    """A teacher seen through an input transform, so it accepts target-task images.

    Random-pad transforms are evaluated at their center offset.
    """

    def __init__(self, model, transform):
        self.model = model
        self.transform = transform
        if isinstance(transform, transforms.RandomPad) and not transform.resolved:
            oy, ox = (n // 2 for n in transform.valid_offsets())
            self.transform = transforms.RandomPad(transform.target_shape, transform.source_shape[:2], (oy, ox))
        self.name = model.name
        self.input_shape = transform.target_shape

    def logits(self, x):
        return self.model.logits(self.transform.apply(x))

    def predict(self, x, batch_size=256):
        x = np.asarray(x)
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(np.argmax(self.logits(x[i:i + batch_size]).data, axis=1))
        return np.concatenate(out)

    def parameters(self):
        params = dict(self.model.parameters())
        for p in self.transform.parameters():
            params[p.name] = p
        return params


# ---------------------------------------------------------------- phases

def standard_train_epoch(model, dataset, optimizer, batch_size, shuffle_rng):
    """One epoch of plain cross-entropy SGD; returns per-step losses."""
    out = []
    for idx in minibatches(len(dataset), batch_size, shuffle_rng):
        loss = losses.xent(model, dataset.images[idx], dataset.labels[idx])
        optimizer.step(ad.grad(loss, optimizer.params))
        out.append(loss.item())
    return out


def finetune_teacher(teacher, transform, dataset, cfg, rngs=None, epochs=None):
    """Retrain only a fresh logit layer of ``teacher`` on the target task.

    The transpose-convolution adapter, when used, trains alongside the head.
    Afterwards every teacher and adapter parameter is frozen.

    Returns:
        the finetuned (frozen) copy of the teacher.
    """
    rngs = rngs or streams(cfg.seed)
    epochs = cfg.finetune_epochs if epochs is None else epochs
    if transform.source_shape != teacher.input_shape:
        raise ad.ShapeMismatch(f"transform yields {transform.source_shape}, teacher expects {teacher.input_shape}")
    seed = rngs.seed("init.head")
    if epochs == 0:
        return teacher.copy().freeze()
    model = nn.freeze_all_but_logits(teacher, num_classes=dataset.num_classes, seed=seed)
    params = nn.logit_parameters(model) + [p for p in transform.parameters() if not p.frozen]
    opt = nn.SGD(params, cfg.lr_teacher, cfg.momentum)
    for _ in range(epochs):
        for idx in minibatches(len(dataset), cfg.batch_size, rngs["data-shuffle.finetune"]):
            t = transforms.resolve(transform, rngs["pad-offset"])
            loss = losses.xent(model, dataset.images[idx], dataset.labels[idx], transform=t)
            opt.step(ad.grad(loss, opt.params))
    model.freeze()
    for p in transform.parameters():
        p.freeze()
    return model


class IGAMTrainer:
    """Alternating student / discriminator optimization against a frozen teacher.

    Each batch: teacher input gradient ``J_t`` (no graph kept), student input
    gradient ``J_s`` (graph kept), one student SGD step on
    ``xent + lambda_adv * L_adv + lambda_diff * L_diff`` and, every
    ``disc_update_period`` steps, one discriminator ascent step on the same
    ``L_adv`` scalar.
    """

    def __init__(self, student, teacher, transform, cfg, disc=None, rngs=None):
        self.cfg = cfg
        self.rngs = rngs or streams(cfg.seed)
        self.student = student
        self.teacher = teacher.freeze()
        self.transform = transform
        self.view = transforms.disc_view(transform)
        if disc is None:
            disc = nn.build(cfg.disc_preset, transforms.disc_input_shape(transform), 1,
                            seed=self.rngs.seed("init.disc"), name="disc")
        self.disc = disc
        self.student_opt = nn.SGD(student.trainable(), cfg.lr_student, cfg.momentum)
        self.disc_opt = nn.SGD(disc.trainable(), cfg.lr_disc, cfg.momentum)
        self.log = RunLog()
        self.step = 0
        self.teacher_hash = nn.parameter_hash(teacher)

    def check_teacher(self):
        if nn.parameter_hash(self.teacher) != self.teacher_hash:
            raise TeacherMutated("teacher parameters changed during IGAM training")

    def teacher_gradient(self, x, y):
        t = transforms.resolve(self.transform, self.rngs["pad-offset"])
        return losses.input_gradient(self.teacher, x, y, create_graph=False, transform=t)

    def train_step(self, x, y):
        cfg = self.cfg
        J_t = self.teacher_gradient(x, y)
        try:
            terms = losses.student_terms(self.student, self.disc, x, y, cfg.weights, J_t,
                                         disc_view=self.view, standardize_J=cfg.standardize_J,
                                         non_saturating=cfg.non_saturating)
        except ad.NonFiniteValue as exc:
            self._skip(f"non-finite forward value: {exc}")
            return None
        scalars = (terms.xent.item(), terms.adv.item(), terms.diff.item())
        if not all(map(math.isfinite, scalars)) or abs(scalars[1]) > DIVERGENCE_LIMIT:
            self._skip(f"divergence guard: xent={scalars[0]:.4g} adv={scalars[1]:.4g} diff={scalars[2]:.4g}")
            return None

        # The discriminator ascends the same L_adv the student descends, so
        # take its gradient from this graph before the student moves.
        disc_due = (self.step + 1) % cfg.disc_update_period == 0
        disc_grads = None
        if disc_due:
            shared = cfg.lambda_adv > 0 and not cfg.non_saturating
            adv = terms.adv if shared else losses.loss_adv(
                self.disc, self._view(J_t), self._view(terms.J_s.detach()), cfg.standardize_J)
            disc_grads = ad.grad(adv, self.disc_opt.params)

        try:
            student_grads = ad.grad(terms.total, self.student_opt.params)
        except ad.NonFiniteValue as exc:
            self._skip(f"non-finite gradient: {exc}")
            return None
        self.student_opt.step(student_grads)
        if disc_grads is not None:
            self.disc_opt.step(disc_grads, ascent=True)

        with ad.no_grad():
            d_t = self.disc(self._view(J_t)).data
            d_s = self.disc(self._view(terms.J_s.detach())).data
        disc_acc = 0.5 * (np.mean(d_t > 0.5) + np.mean(d_s < 0.5))
        row = dict(step=self.step, l_xent=scalars[0], l_adv=scalars[1], l_diff=scalars[2],
                   disc_acc=float(disc_acc), cos_sim=mean_cosine(terms.J_s.data, J_t.data))
        self.log.append(**row)
        self.step += 1
        self.check_teacher()
        return row

    def _view(self, J):
        return self.view(J) if self.view else J

    def _skip(self, reason):
        log.warning("step %d skipped: %s", self.step, reason)
        self.log.skipped.append((self.step, reason))
        self.step += 1

    def epoch(self, dataset):
        for idx in minibatches(len(dataset), self.cfg.batch_size, self.rngs["data-shuffle"]):
            self.train_step(dataset.images[idx], dataset.labels[idx])
        return self.log


def igam_epoch(student, teacher, disc, transform, dataset, cfg, log=None, trainer=None):
    """Run one IGAM epoch; pass ``trainer`` back in to keep optimizer state across epochs."""
    if trainer is None:
        trainer = IGAMTrainer(student, teacher, transform, cfg, disc=disc)
        if log is not None:
            trainer.log = log
    trainer.epoch(dataset)
    return trainer.student, trainer.disc, trainer.log


def gradient_alignment(student, teacher, transform, dataset, n=200):
    """Mean cos(J_s, J_t) and mean L_diff on the first ``n`` samples of ``dataset``."""
    x, y = dataset.images[:n], dataset.labels[:n]
    if isinstance(transform, transforms.RandomPad) and not transform.resolved:
        transform = AdaptedModel(teacher, transform).transform
    J_t = losses.input_gradient(teacher, x, y, transform=transform).data
    J_s = losses.input_gradient(student, x, y).data
    diff = float(np.mean(np.sum((J_s - J_t).reshape(len(x), -1) ** 2, axis=1)))
    return mean_cosine(J_s, J_t), diff


# ---------------------------------------------------------------- experiment runner

@dataclass
class ExperimentResult:
    model: object
    report: object
    log: RunLog = None
    teacher: object = None
    extras: dict = field(default_factory=dict)


def train_standard(train, cfg, epochs, rngs=None, preset=None):
    rngs = rngs or streams(cfg.seed)
    model = nn.build(preset or cfg.student_preset, train.image_shape, train.num_classes,
                     seed=rngs.seed("init.student"), name="standard")
    opt = nn.SGD(model.trainable(), cfg.lr_student, cfg.momentum)
    for _ in range(epochs):
        standard_train_epoch(model, train, opt, cfg.batch_size, rngs["data-shuffle"])
    return model


def train_adversarial(train, cfg, attack_cfg, epochs, rngs=None, preset=None, name="pgd7"):
    rngs = rngs or streams(cfg.seed)
    model = nn.build(preset or cfg.student_preset, train.image_shape, train.num_classes,
                     seed=rngs.seed("init.student"), name=name)
    opt = nn.SGD(model.trainable(), cfg.lr_student, cfg.momentum)
    for _ in range(epochs):
        adversarial_train_epoch(model, train, attack_cfg, opt, cfg.batch_size,
                                rngs["data-shuffle"], rngs["attack"])
    return model


def train_igam(teacher, train, cfg, transform=None, rngs=None, finetuned=False, eval_set=None):
    """Full two-phase procedure: finetune the teacher head, then IGAM-train a fresh student.

    Returns:
        ``(student, finetuned_teacher, trainer)``.
    """
    rngs = rngs or streams(cfg.seed)
    if transform is None:
        transform = transforms.make_transform(cfg.transform.get("kind", "identity"), train.image_shape,
                                              teacher.input_shape, **{k: v for k, v in cfg.transform.items() if k != "kind"})
    if not finetuned:
        teacher = finetune_teacher(teacher, transform, train, cfg, rngs)
    student = nn.build(cfg.student_preset, train.image_shape, train.num_classes,
                       seed=rngs.seed("init.student"), name="igam")
    trainer = IGAMTrainer(student, teacher, transform, cfg, rngs=rngs)
    trainer.initial_alignment = gradient_alignment(student, teacher, transform, eval_set or train)
    for _ in range(cfg.igam_epochs):
        trainer.epoch(train)
    trainer.final_alignment = gradient_alignment(student, teacher, transform, eval_set or train)
    return student, teacher, trainer


def run_experiment(cfg, teacher, train, test, mode="igam", attack_list=None, transform=None,
                   attack_cfg=None, epochs=None):
    """Train one model in ``mode`` and evaluate it.

    Modes: ``igam`` (needs ``teacher``), ``standard``, ``at`` (PGD adversarial
    training with ``attack_cfg``), ``ft`` (logit-head finetuning of ``teacher``).

    Returns:
        :class:`ExperimentResult` with the trained model and its EvalReport.
    """
    from .metrics import EvalReport, evaluate

    rngs = streams(cfg.seed)
    epochs = cfg.igam_epochs if epochs is None else epochs
    attack_list = attack_list or []
    result_log = None
    extras = {}
    if mode == "standard":
        model = train_standard(train, cfg, epochs, rngs)
        name = "Standard"
    elif mode == "at":
        model = train_adversarial(train, cfg, attack_cfg, epochs, rngs)
        name = f"PGD{attack_cfg.steps}-trained"
    elif mode in ("ft", "igam"):
        if teacher is None:
            raise ValueError(f"mode {mode} needs a teacher")
        if transform is None:
            params = {k: v for k, v in cfg.transform.items() if k != "kind"}
            transform = transforms.make_transform(cfg.transform.get("kind", "identity"), train.image_shape,
                                                  teacher.input_shape, **params)
        if mode == "ft":
            ft = finetune_teacher(teacher, transform, train, cfg, rngs, epochs=epochs)
            model = AdaptedModel(ft, transform)
            name = "FT"
        else:
            model, ft, trainer = train_igam(teacher, train, cfg, transform, rngs, eval_set=test)
            result_log = trainer.log
            extras["cos_sim_initial"], extras["l_diff_initial"] = trainer.initial_alignment
            extras["cos_sim_final"], extras["l_diff_final"] = trainer.final_alignment
            extras["teacher"] = ft
            name = "IGAM"
    else:
        raise ValueError(f"unknown mode {mode!r}")
    report = EvalReport()
    row = evaluate(model, test, attack_list, seed=cfg.seed)
    if "cos_sim_final" in extras:
        row["cos_sim"] = extras["cos_sim_final"]
    report.add(name, row)
    return ExperimentResult(model, report, result_log, extras.get("teacher"), extras)


def config_dict(cfg):
    return asdict(cfg)
