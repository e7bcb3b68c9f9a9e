"""Flat ``key = value`` experiment configuration with dotted section keys.

Example::

    # comments start with '#'
    seed = 3
    data.generator = raster-moons
    igam.lambda_adv = 2
    eval.pgd_steps = 5, 10, 20

Unknown keys and bad values are collected and reported together.
"""

from dataclasses import dataclass


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(kind):
    def parse(text):
        text = text.strip()
        if not text:
            return ()
        return tuple(kind(part.strip()) for part in text.split(","))
    return parse


def _str(text):
    return text.strip()


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    doc: str = ""
    check: object = None


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


SCHEMA = {
    "seed": Key(int, 0, "root seed for every random stream"),
    "name": Key(_str, "", "row name in the report (defaults per mode)"),
    # data
    "data.generator": Key(_str, "raster-moons", "raster-moons | blob-K | idx"),
    "data.n_train": Key(int, 1000, check=_pos),
    "data.n_test": Key(int, 300, check=_pos),
    "data.seed_train": Key(int, 1),
    "data.seed_test": Key(int, 2),
    "data.height": Key(int, 28, check=_pos),
    "data.width": Key(int, 28, check=_pos),
    "data.channels": Key(int, 1, check=_pos),
    "data.noise": Key(float, 0.1, check=_nonneg),
    "data.sigma": Key(float, 1.5, check=_pos),
    "data.texture": Key(float, 0.0, check=_nonneg),
    "data.train_images": Key(_str, ""),
    "data.train_labels": Key(_str, ""),
    "data.test_images": Key(_str, ""),
    "data.test_labels": Key(_str, ""),
    "data.classes": Key(_list(int), ()),
    # models
    "model.student": Key(_str, "small-cnn"),
    "model.disc": Key(_str, "disc-cnn-4"),
    "model.checkpoint": Key(_str, "", "checkpoint for evaluate / export-gradients / landscape"),
    "model.num_classes": Key(int, 0, "0 = from the dataset"),
    "teacher.preset": Key(_str, "small-cnn"),
    "teacher.checkpoint": Key(_str, ""),
    "teacher.input_shape": Key(_list(int), (), "H, W, C of the teacher; empty = dataset shape"),
    "teacher.num_classes": Key(int, 0, "classes of the loaded teacher head; 0 = dataset"),
    # plain / adversarial / finetune training
    "train.epochs": Key(int, 5, check=_nonneg),
    "train.lr": Key(float, 0.01, check=_pos),
    "train.momentum": Key(float, 0.9, check=_nonneg),
    "train.batch_size": Key(int, 50, check=_pos),
    # IGAM
    "igam.lr_teacher": Key(float, 0.05, check=_pos),
    "igam.lr_student": Key(float, 0.01, check=_pos),
    "igam.lr_disc": Key(float, 0.01, check=_pos),
    "igam.lambda_adv": Key(float, 1.0, check=_nonneg),
    "igam.lambda_diff": Key(float, 10.0, check=_nonneg),
    "igam.disc_update_period": Key(int, 5, check=_pos),
    "igam.finetune_epochs": Key(int, 1, check=_nonneg),
    "igam.epochs": Key(int, 10, check=_nonneg),
    "igam.non_saturating": Key(_bool, False),
    "igam.standardize_J": Key(_bool, False),
    # input transform (teacher side)
    "transform.kind": Key(_str, "identity"),
    "transform.factor": Key(int, 0, "avgpool_resize factor; 0 = infer"),
    "transform.size": Key(_list(int), (), "output H, W; empty = teacher input"),
    "transform.children": Key(_list(str), (), "composite: ordered child kinds"),
    "transform.seed": Key(int, 0),
    # training attack
    "attack.epsilon": Key(float, 0.1, check=_nonneg),
    "attack.steps": Key(int, 7, check=_pos),
    "attack.eta": Key(float, 0.0, "0 = epsilon / 4", check=_nonneg),
    "attack.random_start": Key(_bool, True),
    # evaluation
    "eval.epsilon": Key(float, 0.1, check=_nonneg),
    "eval.pgd_steps": Key(_list(int), (5, 10, 20)),
    "eval.eta": Key(float, 0.0, "0 = epsilon / 4", check=_nonneg),
    "eval.fgsm": Key(_bool, True),
    # artifacts
    "export.count": Key(int, 8, check=_pos),
    "landscape.extent": Key(float, 0.3, check=_nonneg),
    "landscape.resolution": Key(int, 21, check=_pos),
    "landscape.index": Key(int, 0, check=_nonneg),
    "report.inputs": Key(_list(str), ()),
}


def parse_text(text):
    """Parse config text into ``{key: raw string}``; returns (raw, errors)."""
    raw, errors = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            errors.append(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw, errors


def resolve(raw, overrides=None):
    """Apply the schema to raw strings: defaults, type conversion, range checks.

    Raises:
        ConfigError listing every problem found.
    """
    values, errors = resolve_partial(raw, overrides)
    if errors:
        raise ConfigError(errors)
    return values


def resolve_partial(raw, overrides=None):
    """Like :func:`resolve`, but returns ``(values, errors)``; bad keys keep their defaults."""
    raw = dict(raw)
    for k, v in (overrides or {}).items():
        raw[k] = str(v)
    errors = []
    values = {}
    for key in raw:
        if key not in SCHEMA and not key.startswith("transform."):
            errors.append(f"unknown key {key!r}")
    for key, spec in SCHEMA.items():
        if key not in raw:
            values[key] = spec.default
            continue
        try:
            v = spec.parse(raw[key])
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
            values[key] = spec.default
            continue
        if spec.check is not None and not spec.check(v):
            errors.append(f"{key}: value {v!r} out of range")
            values[key] = spec.default
            continue
        values[key] = v
    # Per-child composite parameters: transform.<kind>.size = H, W
    for key in raw:
        if key.startswith("transform.") and key not in SCHEMA:
            parts = key.split(".")
            if len(parts) == 3 and parts[2] in ("size", "factor"):
                try:
                    values[key] = _list(int)(raw[key]) if parts[2] == "size" else int(raw[key])
                except ValueError as exc:
                    errors.append(f"{key}: {exc}")
            else:
                errors.append(f"unknown key {key!r}")
    return values, errors


def load(path, overrides=None):
    with open(path) as f:
        raw, errors = parse_text(f.read())
    values, more = resolve_partial(raw, overrides)
    if errors + more:
        raise ConfigError(errors + more)
    return values


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump(values):
    """Serialize resolved values, sorted by key, one per line."""
    return "".join(f"{k} = {format_value(values[k])}\n" for k in sorted(values))

