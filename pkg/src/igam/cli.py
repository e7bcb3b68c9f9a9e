"""Command-line experiment runner.

Usage::

    igam <subcommand> --config run.cfg --out runs/a [--seed N]

Subcommands: train-standard, train-at, finetune-teacher, train-igam,
evaluate, export-gradients, landscape, report. Every run writes
``config.resolved`` beside its outputs; passing that file back through
``--config`` reproduces the run's CSV outputs byte for byte.

Failures exit nonzero after printing one JSON line to stderr, e.g.::

    {"status": "error", "kind": "ConfigError", "errors": ["unknown key 'igam.lamda_adv'"]}
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import metrics, nn, transforms
from .attacks import AttackConfig
from .config import ConfigError
from .data import load_idx, synth_dataset
from .rng import streams
from .trainer import (AdaptedModel, TrainConfig, finetune_teacher, train_adversarial, train_igam,
                      train_standard)

log = logging.getLogger("igam")

SUBCOMMANDS = ("train-standard", "train-at", "finetune-teacher", "train-igam", "evaluate",
               "export-gradients", "landscape", "report")

REQUIRED = {
    "finetune-teacher": ("teacher.checkpoint",),
    "train-igam": ("teacher.checkpoint",),
    "evaluate": ("model.checkpoint",),
    "export-gradients": ("model.checkpoint",),
    "landscape": ("model.checkpoint",),
    "report": ("report.inputs",),
}


# ---------------------------------------------------------------- config plumbing

def check_semantics(mode, v):
    """Cross-key checks that single-key parsing cannot catch; returns error strings."""
    errors = []
    for key in REQUIRED.get(mode, ()):
        if not v.get(key):
            errors.append(f"{mode}: {key} is required")
    gen = v["data.generator"]
    if gen == "idx":
        for key in ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels"):
            if not v[key]:
                errors.append(f"data.generator = idx needs {key}")
    elif gen != "raster-moons" and not (gen.startswith("blob-") and gen[5:].isdigit()):
        errors.append(f"data.generator: unknown generator {gen!r}")
    if v["teacher.input_shape"] and len(v["teacher.input_shape"]) != 3:
        errors.append("teacher.input_shape must be H, W, C")
    if v["transform.size"] and len(v["transform.size"]) != 2:
        errors.append("transform.size must be H, W")
    kinds = {"identity", "avgpool_resize", "bilinear_upsize", "center_crop", "center_pad",
             "random_pad", "channel_average", "transpose_conv", "composite"}
    if v["transform.kind"] not in kinds:
        errors.append(f"transform.kind: unknown kind {v['transform.kind']!r}")
    if v["transform.kind"] == "composite" and not v["transform.children"]:
        errors.append("transform.kind = composite needs transform.children")
    for child in v["transform.children"]:
        if child not in kinds - {"composite"}:
            errors.append(f"transform.children: unknown kind {child!r}")
    for section in ("attack", "eval"):
        eps, eta = v[f"{section}.epsilon"], v[f"{section}.eta"]
        if eta > 0 and eps > 0 and eta > eps:
            errors.append(f"{section}.eta ({eta}) exceeds {section}.epsilon ({eps})")
    for k in v["eval.pgd_steps"]:
        if k < 1:
            errors.append(f"eval.pgd_steps: {k} is not a positive step count")
    return errors


def resolve_config(mode, path, seed=None):
    """Load, override and validate; every problem is reported together."""
    overrides = {"seed": seed} if seed is not None else None
    errors = []
    if path is None:
        raw = {}
    else:
        try:
            with open(path) as f:
                raw, errors = cfgmod.parse_text(f.read())
        except OSError as exc:
            raise ConfigError([f"cannot read config: {exc}"]) from None
    values, more = cfgmod.resolve_partial(raw, overrides)
    errors += more + check_semantics(mode, values)
    if errors:
        raise ConfigError(errors)
    return values


def train_config(v, igam=False):
    return TrainConfig(
        lr_teacher=v["igam.lr_teacher"],
        lr_student=v["igam.lr_student"] if igam else v["train.lr"],
        lr_disc=v["igam.lr_disc"],
        momentum=v["train.momentum"],
        lambda_adv=v["igam.lambda_adv"],
        lambda_diff=v["igam.lambda_diff"],
        disc_update_period=v["igam.disc_update_period"],
        finetune_epochs=v["igam.finetune_epochs"] if igam else v["train.epochs"],
        igam_epochs=v["igam.epochs"],
        batch_size=v["train.batch_size"],
        seed=v["seed"],
        non_saturating=v["igam.non_saturating"],
        standardize_J=v["igam.standardize_J"],
        student_preset=v["model.student"],
        disc_preset=v["model.disc"],
    )


def attack_config(v, section="attack"):
    eta = v[f"{section}.eta"] or None
    return AttackConfig(v[f"{section}.epsilon"], v.get(f"{section}.steps", 1), eta,
                        v.get(f"{section}.random_start", False))


def eval_attacks(v):
    eps = v["eval.epsilon"]
    out = metrics.standard_attacks(eps, v["eval.pgd_steps"], v["eval.eta"] or None)
    return out if v["eval.fgsm"] else out[1:]


def load_datasets(v):
    if v["data.generator"] == "idx":
        train = load_idx(v["data.train_images"], v["data.train_labels"], "train")
        test = load_idx(v["data.test_images"], v["data.test_labels"], "test")
    else:
        shape = dict(height=v["data.height"], width=v["data.width"], channels=v["data.channels"])
        params = dict(sigma=v["data.sigma"], texture=v["data.texture"])
        if v["data.generator"] == "raster-moons":
            params["noise"] = v["data.noise"]
        train = synth_dataset(v["data.generator"], v["data.n_train"], v["data.seed_train"],
                              split="train", **shape, **params)
        test = synth_dataset(v["data.generator"], v["data.n_test"], v["data.seed_test"],
                             split="test", **shape, **params)
    if v["data.classes"]:
        train = train.select_classes(v["data.classes"])
        test = test.select_classes(v["data.classes"])
    return train, test


def build_transform(v, target_shape, source_shape):
    def params_for(kind, prefix):
        p = {}
        size = v.get(f"{prefix}size")
        if size:
            p["size"] = tuple(size)
        factor = v.get(f"{prefix}factor")
        if factor:
            p["factor"] = factor
        if kind == "transpose_conv":
            p["seed"] = v["transform.seed"]
        return p

    kind = v["transform.kind"]
    if kind == "composite":
        children = [{"kind": c, **params_for(c, f"transform.{c}.")} for c in v["transform.children"]]
        return transforms.make_transform("composite", target_shape, source_shape, children=children)
    return transforms.make_transform(kind, target_shape, source_shape, **params_for(kind, "transform."))


def load_teacher(v, data_shape, num_classes):
    shape = tuple(v["teacher.input_shape"]) or data_shape
    teacher = nn.build(v["teacher.preset"], shape, v["teacher.num_classes"] or num_classes, seed=0,
                       name="teacher")
    return nn.load_checkpoint(teacher, v["teacher.checkpoint"])


def load_model(v, train):
    """The model named by ``model.checkpoint``.

    With ``transform.kind = identity`` it is a ``model.student`` network on
    dataset-shaped inputs; otherwise a ``teacher.preset`` network seen through
    the configured transform, adapter weights included.
    """
    k = v["model.num_classes"] or train.num_classes
    state = nn.read_checkpoint(v["model.checkpoint"])
    if v["transform.kind"] == "identity":
        model = nn.build(v["model.student"], train.image_shape, k, seed=0, name="model")
        model.load_state(state)
        return model
    shape = tuple(v["teacher.input_shape"]) or train.image_shape
    teacher = nn.build(v["teacher.preset"], shape, k, seed=0, name="teacher")
    t = build_transform(v, train.image_shape, shape)
    adapter = {p.name: p for p in t.parameters()}
    for name, p in adapter.items():
        if name not in state:
            raise nn.CheckpointError(f"missing adapter tensor {name}")
        p.data = np.asarray(state.pop(name), dtype=np.float64).copy()
    teacher.load_state(state)
    return AdaptedModel(teacher, t)


# ---------------------------------------------------------------- outputs

class Outputs:
    """Output directory guard: refuses to overwrite any input file of the run."""

    def __init__(self, out_dir, inputs):
        self.dir = out_dir
        self.inputs = {os.path.realpath(p) for p in inputs if p}
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        p = os.path.join(self.dir, name)
        if os.path.realpath(p) in self.inputs:
            raise FileExistsError(f"refusing to overwrite input file {p}")
        return p


def write_report(out, name, row):
    report = metrics.EvalReport()
    report.add(name, row)
    report.to_csv(out.path("report.csv"))
    return report


def write_alignment(out, initial, final):
    with open(out.path("alignment.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["phase", "cos_sim", "l_diff"])
        w.writerow(["initial", repr(float(initial[0])), repr(float(initial[1]))])
        w.writerow(["final", repr(float(final[0])), repr(float(final[1]))])


# ---------------------------------------------------------------- subcommands

def cmd_train_standard(v, out):
    train, test = load_datasets(v)
    cfg = train_config(v)
    model = train_standard(train, cfg, v["train.epochs"], streams(cfg.seed))
    nn.save_checkpoint(model, out.path("model.ckpt"))
    write_report(out, v["name"] or "Standard", metrics.evaluate(model, test, eval_attacks(v), seed=cfg.seed))


def cmd_train_at(v, out):
    train, test = load_datasets(v)
    cfg = train_config(v)
    acfg = attack_config(v)
    model = train_adversarial(train, cfg, acfg, v["train.epochs"], streams(cfg.seed))
    nn.save_checkpoint(model, out.path("model.ckpt"))
    row = metrics.evaluate(model, test, eval_attacks(v), seed=cfg.seed)
    write_report(out, v["name"] or f"PGD{acfg.steps}-trained", row)


def _teacher_and_transform(v, train):
    teacher = load_teacher(v, train.image_shape, train.num_classes)
    return teacher, build_transform(v, train.image_shape, teacher.input_shape)


def cmd_finetune_teacher(v, out):
    train, test = load_datasets(v)
    cfg = train_config(v)
    teacher, t = _teacher_and_transform(v, train)
    ft = finetune_teacher(teacher, t, train, cfg, streams(cfg.seed), epochs=v["train.epochs"])
    adapted = AdaptedModel(ft, t)
    nn.save_checkpoint(adapted, out.path("teacher_ft.ckpt"))
    write_report(out, v["name"] or "FT", metrics.evaluate(adapted, test, eval_attacks(v), seed=cfg.seed))


def cmd_train_igam(v, out):
    train, test = load_datasets(v)
    cfg = train_config(v, igam=True)
    teacher, t = _teacher_and_transform(v, train)
    student, ft, trainer = train_igam(teacher, train, cfg, t, streams(cfg.seed), eval_set=test)
    nn.save_checkpoint(student, out.path("student.ckpt"))
    nn.save_checkpoint(AdaptedModel(ft, t), out.path("teacher_ft.ckpt"))
    nn.save_checkpoint(trainer.disc, out.path("disc.ckpt"))
    trainer.log.to_csv(out.path("runlog.csv"))
    write_alignment(out, trainer.initial_alignment, trainer.final_alignment)
    write_report(out, v["name"] or "IGAM", metrics.evaluate(student, test, eval_attacks(v), seed=cfg.seed))


def cmd_evaluate(v, out):
    train, test = load_datasets(v)
    model = load_model(v, train)
    name = v["name"] or os.path.splitext(os.path.basename(v["model.checkpoint"]))[0]
    write_report(out, name, metrics.evaluate(model, test, eval_attacks(v), seed=v["seed"]))


def cmd_export_gradients(v, out):
    train, test = load_datasets(v)
    model = load_model(v, train)
    n = min(v["export.count"], len(test))
    x, y = test.images[:n], test.labels[:n]
    name = v["name"] or "grad"
    paths = metrics.export_input_gradients(model, x, y, out.path("gradients"), name=name)
    from . import losses

    J = losses.input_gradient(model, x, y).data
    with open(out.path("gradients.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["file", "label", "smoothness"])
        for p, label, g in zip(paths, y, J):
            w.writerow([os.path.basename(p), int(label), repr(metrics.gradient_smoothness(g))])


def cmd_landscape(v, out):
    train, test = load_datasets(v)
    model = load_model(v, train)
    i = v["landscape.index"]
    if i >= len(test):
        raise ConfigError([f"landscape.index {i} >= test set size {len(test)}"])
    x, y = test.images[i], test.labels[i]
    acfg = AttackConfig(v["eval.epsilon"], max(v["eval.pgd_steps"] or (20,)), v["eval.eta"] or None)
    rng = streams(v["seed"])["landscape"]
    adv_dir, rand_dir = metrics.landscape_directions(model, x, y, acfg, rng)
    grid = metrics.loss_landscape_grid(model, x, y, adv_dir, rand_dir, v["landscape.extent"],
                                       v["landscape.resolution"])
    metrics.write_landscape_csv(out.path("landscape.csv"), grid)


def cmd_report(v, out):
    merged = metrics.EvalReport()
    for path in v["report.inputs"]:
        merged.merge(metrics.EvalReport.from_csv(path))
    merged.to_csv(out.path("report.csv"))
    with open(out.path("report.txt"), "w") as f:
        f.write(merged.format_table() + "\n")
    print(merged.format_table())


COMMANDS = {
    "train-standard": cmd_train_standard,
    "train-at": cmd_train_at,
    "finetune-teacher": cmd_finetune_teacher,
    "train-igam": cmd_train_igam,
    "evaluate": cmd_evaluate,
    "export-gradients": cmd_export_gradients,
    "landscape": cmd_landscape,
    "report": cmd_report,
}


def _input_files(v, config_path):
    keys = ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels",
            "teacher.checkpoint", "model.checkpoint")
    return [config_path] + [v[k] for k in keys] + list(v["report.inputs"])


def error_line(kind, errors):
    return json.dumps({"status": "error", "kind": kind, "errors": list(errors)})


def build_parser():
    p = argparse.ArgumentParser(prog="igam", description="Input gradient adversarial matching experiments.")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config's root seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        v = resolve_config(args.command, args.config, args.seed)
        out = Outputs(args.out, _input_files(v, args.config))
        with open(out.path("config.resolved"), "w") as f:
            f.write(cfgmod.dump(v))
        COMMANDS[args.command](v, out)
    except ConfigError as exc:
        print(error_line("ConfigError", exc.errors), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        print(error_line(type(exc).__name__, [str(exc)]), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, "out": args.out}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
