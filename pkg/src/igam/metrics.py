"""Robustness reports, gradient alignment, saliency export and loss landscapes."""

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from . import losses
from .attacks import AttackConfig, attack
from .rng import derive_seed

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


class ZeroGradient(ValueError):
    pass


def standard_attacks(epsilon, pgd_steps=(5, 10, 20), eta=None):
    """Table-style attack list: FGSM then PGD_k for each k."""
    out = [("FGSM", AttackConfig(epsilon, 1, epsilon if epsilon > 0 else 1.0))]
    for k in pgd_steps:
        out.append((f"PGD{k}", AttackConfig(epsilon, k, eta)))
    return out


def _threads():
    try:
        return max(1, int(os.environ.get("IGAM_THREADS", "1")))
    except ValueError:
        return 1


def accuracy(model, x, y):
    return 100.0 * float(np.mean(model.predict(x) == np.asarray(y)))


def evaluate(model, dataset, attack_list, seed=0, workers=None):
    """Clean and per-attack accuracy (%) of ``model`` on ``dataset``.

    Work is split into fixed-size chunks; random starts draw from a stream
    keyed by (seed, attack name, chunk), so results do not depend on the
    number of workers.
    """
    x, y = dataset.images, dataset.labels
    chunks = [slice(i, i + EVAL_CHUNK) for i in range(0, len(y), EVAL_CHUNK)]
    row = {"Clean": accuracy(model, x, y)}

    def correct(name, cfg, ci):
        sl = chunks[ci]
        rng = np.random.default_rng(derive_seed(seed, f"eval/{name}/{ci}"))
        x_adv = attack(model, x[sl], y[sl], cfg, rng=rng)
        return int(np.sum(model.predict(x_adv) == y[sl]))

    workers = workers or _threads()
    for name, cfg in attack_list:
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                counts = list(pool.map(lambda ci: correct(name, cfg, ci), range(len(chunks))))
        else:
            counts = [correct(name, cfg, ci) for ci in range(len(chunks))]
        row[name] = 100.0 * sum(counts) / len(y)
    check_monotone(row)
    return row


def check_monotone(row, slack=1.0):
    """Warn when PGD accuracy rises with more steps by more than ``slack`` points."""
    pgd = sorted((int(k[3:]), v) for k, v in row.items() if k.startswith("PGD") and k[3:].isdigit())
    ok = all(b <= a + slack for (_, a), (_, b) in zip(pgd, pgd[1:]))
    if not ok:
        log.warning("PGD accuracy not monotone in steps: %s", pgd)
    return ok


class EvalReport:
    """Rows of accuracy columns keyed by model name, CSV round-trippable."""

    def __init__(self):
        self.rows = {}

    def add(self, name, row):
        for k, v in row.items():
            if k in ("cos_sim", "alignment"):
                continue
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}.{k} = {v} outside [0, 100]")
        self.rows[name] = dict(row)

    @property
    def columns(self):
        cols = []
        for row in self.rows.values():
            for k in row:
                if k not in cols:
                    cols.append(k)
        aux = [c for c in cols if c in ("cos_sim", "alignment")]
        return [c for c in cols if c not in aux] + aux

    def __getitem__(self, name):
        return self.rows[name]

    def __eq__(self, other):
        return isinstance(other, EvalReport) and self.rows == other.rows

    def merge(self, other):
        for name, row in other.rows.items():
            self.rows[name] = dict(row)
        return self

    def to_csv(self, path):
        cols = self.columns
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["model"] + cols)
            for name, row in self.rows.items():
                w.writerow([name] + [repr(float(row[c])) if c in row else "" for c in cols])

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            for rec in reader:
                out.rows[rec[0]] = {c: float(v) for c, v in zip(header[1:], rec[1:]) if v != ""}
        return out

    def format_table(self, digits=1):
        cols = self.columns
        lines = ["Model | " + " | ".join(cols)]
        for name, row in self.rows.items():
            cells = [f"{row[c]:.{digits if c not in ('cos_sim', 'alignment') else 3}f}" if c in row else "-"
                     for c in cols]
            lines.append(f"{name} | " + " | ".join(cells))
        return "\n".join(lines)


# ---------------------------------------------------------------- alignment

def top_two_gap_gradient(model, x):
    """Gradient of (top logit - runner-up logit) at a single input.

    Ties resolve by index order, lowest first.
    """
    x = np.asarray(x, dtype=np.float64)
    xt = ad.Tensor(x[None], requires_grad=True)
    logits = model.logits(xt)
    if logits.shape[1] < 2:
        raise ValueError("alignment needs at least two logits")
    order = np.argsort(-logits.data[0], kind="stable")
    gap = logits[0, int(order[0])] - logits[0, int(order[1])]
    return ad.grad(gap, xt).data[0]


def alignment(model, x):
    """``|<x, g>| / ||g||`` with ``g`` the input gradient of the top-two logit gap."""
    g = top_two_gap_gradient(model, x)
    norm = float(np.linalg.norm(g))
    if norm < 1e-12:
        raise ZeroGradient("top-two logit gap has zero input gradient")
    return abs(float(np.sum(np.asarray(x) * g))) / norm


def mean_alignment(model, images):
    vals = []
    for x in images:
        try:
            vals.append(alignment(model, x))
        except ZeroGradient:
            continue
    return float(np.mean(vals)) if vals else float("nan")


def spearman(a, b):
    """Rank correlation, logged as an exploratory statistic across models."""
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)


# ---------------------------------------------------------------- saliency export

def normalize_gradient_image(J):
    """Per-image min-max scaling to [0, 1]; a constant image maps to 0.5."""
    J = np.asarray(J, dtype=np.float64)
    lo, hi = J.min(), J.max()
    if hi - lo <= 0:
        return np.full_like(J, 0.5)
    return (J - lo) / (hi - lo)


def quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, img):
    """Binary PGM for (H, W) / (H, W, 1), PPM for (H, W, 3); ``img`` is uint8."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_pnm(path):
    with open(path, "rb") as f:
        buf = f.read()
    parts = buf.split(maxsplit=4)
    magic, w, h, _ = parts[0], int(parts[1]), int(parts[2]), parts[3]
    data = np.frombuffer(parts[4], dtype=np.uint8)
    return data.reshape(h, w) if magic == b"P5" else data.reshape(h, w, 3)


def export_input_gradients(model, images, labels, out_dir, name=None):
    """Write each image's input gradient as an 8-bit PGM/PPM; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    name = name or getattr(model, "name", "model")
    J = losses.input_gradient(model, np.asarray(images), np.asarray(labels)).data
    ext = "ppm" if J.shape[-1] == 3 else "pgm"
    paths = []
    for i, g in enumerate(J):
        path = os.path.join(out_dir, f"{name}_{i:04d}.{ext}")
        write_pnm(path, quantize(normalize_gradient_image(g)))
        paths.append(path)
    return paths


def gradient_smoothness(J):
    """Mean lag-1 spatial autocorrelation of gradient images (higher = smoother)."""
    J = np.asarray(J, dtype=np.float64)
    if J.ndim == 3:
        J = J[None]
    vals = []
    for g in J:
        g = g - g.mean()
        denom = np.sum(g * g)
        if denom <= 0:
            continue
        horiz = np.sum(g[:, 1:] * g[:, :-1])
        vert = np.sum(g[1:] * g[:-1])
        vals.append(0.5 * (horiz + vert) / denom)
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------- loss landscape

def landscape_directions(model, x, y, cfg, rng):
    """Adversarial direction (sign of the PGD perturbation) and a random sign direction.

    Both have unit l-infinity norm, so grid extents read in pixel units.
    """
    x = np.asarray(x, dtype=np.float64)
    from .attacks import pgd

    delta = pgd(model, x[None], np.atleast_1d(y), cfg)[0] - x
    scale = np.abs(delta).max()
    adv_dir = delta / scale if scale > 0 else delta
    rand_dir = rng.choice([-1.0, 1.0], size=x.shape)
    return adv_dir, rand_dir


def loss_landscape_grid(model, x, y, adv_dir, rand_dir, extent, resolution):
    """Cross-entropy and predicted class on ``x + a*adv_dir + b*rand_dir``.

    Returns:
        dict with ``a`` and ``b`` (1-D coordinates), ``loss`` and ``cls``
        arrays of shape (resolution, resolution) indexed ``[i_a, i_b]``.
    """
    x = np.asarray(x, dtype=np.float64)
    coords = extent * np.linspace(-1.0, 1.0, resolution)
    if resolution % 2:
        coords[resolution // 2] = 0.0
    aa, bb = np.meshgrid(coords, coords, indexing="ij")
    pts = x[None] + aa.reshape(-1, *[1] * x.ndim) * adv_dir[None] + bb.reshape(-1, *[1] * x.ndim) * rand_dir[None]
    labels = np.full(len(pts), int(np.atleast_1d(y)[0]))
    loss = np.empty(len(pts))
    cls = np.empty(len(pts), dtype=int)
    with ad.no_grad():
        for i in range(0, len(pts), EVAL_CHUNK):
            sl = slice(i, i + EVAL_CHUNK)
            logits = model.logits(pts[sl])
            loss[sl] = losses.xent_from_logits(logits, labels[sl], reduction="none").data
            cls[sl] = np.argmax(logits.data, axis=1)
    shape = (resolution, resolution)
    return {"a": coords, "b": coords.copy(), "loss": loss.reshape(shape), "cls": cls.reshape(shape)}


def write_landscape_csv(path, grid):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["a", "b", "loss", "class"])
        for i, a in enumerate(grid["a"]):
            for j, b in enumerate(grid["b"]):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(grid["loss"][i, j])), int(grid["cls"][i, j])])


def read_landscape_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    a = sorted({float(r["a"]) for r in rows})
    b = sorted({float(r["b"]) for r in rows})
    loss = np.empty((len(a), len(b)))
    cls = np.empty((len(a), len(b)), dtype=int)
    for r in rows:
        i, j = a.index(float(r["a"])), b.index(float(r["b"]))
        loss[i, j] = float(r["loss"])
        cls[i, j] = int(r["class"])
    return {"a": np.array(a), "b": np.array(b), "loss": loss, "cls": cls}
