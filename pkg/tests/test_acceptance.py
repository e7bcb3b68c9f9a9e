"""Acceptance criteria 1-10, one test each, each printing a PASS/FAIL line.

The end-to-end criteria (6, 7, 8) share trained models through
``experiments``; expect about ten minutes on one CPU core.
"""

import math
import time

import numpy as np
import pytest

import experiments as ex
from conftest import record
from igam import autodiff as ad
from igam import cli, losses, metrics, nn
from igam import transforms as tf
from igam.attacks import AttackConfig, fgsm, pgd
from igam.autodiff import Tensor
from igam.data import synth_dataset
from igam.rng import streams
from igam.trainer import IGAMTrainer, TrainConfig, standard_train_epoch
from igam.data import minibatches


def verdict(n, ok, detail):
    record(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1

def test_criterion_01_gradient_correctness():
    t0 = time.time()
    model = nn.build("small-cnn", (8, 8, 1), 3, seed=0)
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(2, 8, 8, 1)), np.array([0, 2])
    J_t = rng.normal(scale=0.05, size=x.shape)
    conv_w = model.layers[0].w
    base_w = conv_w.data.copy()

    def with_w(fn):
        def f(t):
            conv_w.data = t.data
            return fn(x)
        return f

    def xent(t):
        return losses.xent(model, t, y)

    def grad_norm(t):
        _, J = losses.loss_and_input_gradient(model, t, y, create_graph=True)
        return ad.l2_norm_sq(J)

    def l_diff(t):
        _, J = losses.loss_and_input_gradient(model, t, y, create_graph=True)
        return losses.loss_diff(J, J_t)

    errs = {"xent/x": ad.finite_difference_check(xent, x)}
    analytic = ad.grad(with_w(xent)(Tensor(base_w)), conv_w).data
    errs["xent/w"] = ad.finite_difference_check(with_w(xent), base_w, analytic=analytic)
    errs["|J|^2/x"] = ad.finite_difference_check(grad_norm, x)
    errs["L_diff/x"] = ad.finite_difference_check(l_diff, x)
    for name, fn in (("|J|^2/w", grad_norm), ("L_diff/w", l_diff)):
        analytic = ad.grad(with_w(fn)(Tensor(base_w)), conv_w).data
        errs[name] = ad.finite_difference_check(with_w(fn), base_w, analytic=analytic)
    conv_w.data = base_w
    elapsed = time.time() - t0
    ok = (errs["xent/x"] < 1e-4 and errs["xent/w"] < 1e-4
          and all(v < 1e-3 for k, v in errs.items() if not k.startswith("xent")) and elapsed < 60)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; {elapsed:.1f}s"
    verdict(1, ok, detail)


# ---------------------------------------------------------------- 2

class LookupDisc:
    """Discriminator over 8 one-hot J values with a prescribed output per value."""

    def __init__(self, d):
        self.logit = np.log(d) - np.log1p(-d)

    def logits(self, J):
        return ad.matmul(ad.flatten(J), Tensor(self.logit[:, None]))


def _adv_loss_at_optimum(counts_t, counts_s):
    """L_adv through ``losses.loss_adv`` on batches realizing two dyadic pmfs."""
    p_t, p_s = counts_t / counts_t.sum(), counts_s / counts_s.sum()
    disc = LookupDisc(losses.optimal_discriminator_oracle(p_t, p_s))
    eye = np.eye(8)
    J_t = Tensor(np.repeat(eye, counts_t, axis=0))
    J_s = Tensor(np.repeat(eye, counts_s, axis=0))
    return losses.loss_adv(disc, J_t, J_s).item(), p_t, p_s


def test_criterion_02_gan_optimum_oracle():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    strictly_above = True
    for _ in range(20):
        # Counts summing to 64 make every mass dyadic, so sums are exact.
        counts_t = rng.multinomial(56, np.ones(8) / 8) + 1
        counts_s = rng.multinomial(56, np.ones(8) / 8) + 1
        value, p_t, p_s = _adv_loss_at_optimum(counts_t, counts_s)
        target = 2 * losses.js_divergence(p_t, p_s) - math.log(4)
        worst = max(worst, abs(value - target))
        # Exact expectation formula agrees as well, including zero masses.
        p_z = p_t.copy()
        p_z[:3] = 0
        p_z /= p_z.sum()
        d = losses.optimal_discriminator_oracle(p_z, p_s)
        worst = max(worst, abs(losses.adv_loss_expectation(p_z, p_s, d)
                               - (2 * losses.js_divergence(p_z, p_s) - math.log(4))))
        strictly_above &= value > -math.log(4)
    same = rng.multinomial(56, np.ones(8) / 8) + 1
    equal_value, _, _ = _adv_loss_at_optimum(same, same.copy())
    exact = equal_value == -math.log(4)
    elapsed = time.time() - t0
    ok = worst < 1e-10 and exact and strictly_above and elapsed < 1
    verdict(2, ok, f"max |L_adv - (2 JS - log 4)| = {worst:.1e}; matched pmfs give -log 4 exactly: {exact}; "
                   f"mismatched pmfs strictly above: {strictly_above}; {elapsed:.2f}s")


# ---------------------------------------------------------------- 3

def test_criterion_03_transform_algebra():
    t0 = time.time()
    rng = np.random.default_rng(0)
    kinds = [
        tf.make_transform("identity", (8, 8, 3)),
        tf.make_transform("avgpool_resize", (8, 8, 3), (4, 4, 3)),
        tf.make_transform("bilinear_upsize", (4, 4, 3), (8, 8, 3)),
        tf.make_transform("center_crop", (8, 8, 3), (6, 6, 3)),
        tf.make_transform("center_pad", (6, 6, 3), (8, 8, 3)),
        tf.make_transform("random_pad", (5, 5, 3), (8, 8, 3), offset=(1, 3)),
        tf.make_transform("channel_average", (8, 8, 3)),
        tf.make_transform("transpose_conv", (4, 4, 3), (8, 8, 3), seed=2),
        tf.make_transform("composite", (8, 8, 3), (6, 6, 1),
                          children=[{"kind": "channel_average"}, {"kind": "center_crop"}]),
    ]
    adjoint_err = 0.0
    for t in kinds:
        A, b = tf.materialize_affine(t)
        x = rng.normal(size=(1,) + t.target_shape)
        v = rng.normal(size=(1,) + t.source_shape)
        xt = Tensor(x, requires_grad=True)
        y = t.apply(xt)
        pull = ad.grad(ad.sum_(y * Tensor(v)), xt).data.reshape(-1)
        adjoint_err = max(adjoint_err, np.max(np.abs(pull - A.T @ v.reshape(-1))),
                          np.max(np.abs(y.data.reshape(-1) - (A @ x.reshape(-1) + b))))
    pool_exact = True
    for h, w, c in ((2, 2, 1), (4, 6, 3), (28, 28, 1), (10, 4, 2)):
        x = rng.uniform(size=(3, h, w, c))
        pooled = tf.make_transform("avgpool_resize", (h, w, c), (h // 2, w // 2, c)).apply(Tensor(x)).data
        pool_exact &= np.array_equal(pooled, tf.bilinear_resize(x, (h // 2, w // 2)).data)
    pad_crop = True
    for (h, w), (ph, pw) in (((5, 7), (9, 9)), ((28, 28), (32, 32)), ((3, 4), (3, 8))):
        x = rng.uniform(size=(2, h, w, 2))
        padded = tf.make_transform("center_pad", (h, w, 2), (ph, pw, 2)).apply(Tensor(x))
        pad_crop &= np.array_equal(tf.make_transform("center_crop", (ph, pw, 2), (h, w, 2)).apply(padded).data, x)
        for oy in range(ph - h + 1):
            for ox in range(pw - w + 1):
                t = tf.make_transform("random_pad", (h, w, 2), (ph, pw, 2), offset=(oy, ox))
                inner = t.apply(Tensor(x)).data[:, oy:oy + h, ox:ox + w]
                pad_crop &= np.array_equal(inner, x)
    elapsed = time.time() - t0
    ok = adjoint_err < 1e-10 and pool_exact and pad_crop and elapsed < 10
    verdict(3, ok, f"{len(kinds)} kinds, max adjoint/affine error {adjoint_err:.1e}; avgpool == bilinear "
                   f"downsize bitwise: {pool_exact}; pad then crop identity: {pad_crop}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 4

def test_criterion_04_attack_contracts():
    t0 = time.time()
    train = synth_dataset("raster-moons", 400, seed=11, noise=0.1)
    test = synth_dataset("raster-moons", 300, seed=12, noise=0.1, split="test")
    model = nn.build("small-cnn", train.image_shape, 2, seed=0, name="toy")
    opt = nn.SGD(model.trainable(), 0.01)
    for _ in range(3):
        standard_train_epoch(model, train, opt, 50, np.random.default_rng(0))
    x, y = test.images[:50], test.labels[:50]

    bit_exact = all(
        pgd(model, x, y, AttackConfig(eps, 1, eta)).tobytes() == fgsm(model, x, y, eps).tobytes()
        for eps, eta in ((0.05, 0.05), (0.1, 0.3), (0.02, 0.02)))

    eps = 0.04
    contained = []

    def check(delta):
        x_adv = np.clip(x + delta, 0.0, 1.0)
        contained.append(bool(np.all(x_adv >= x - eps) and np.all(x_adv <= x + eps)))

    pgd(model, x, y, AttackConfig(eps, 20, eps / 4, random_start=True), rng=np.random.default_rng(1), callback=check)
    row = metrics.evaluate(model, test, [(f"PGD{k}", AttackConfig(eps, k, eps / 4)) for k in (5, 10, 20)])
    accs = [row["PGD5"], row["PGD10"], row["PGD20"]]
    monotone = all(b <= a + 1.0 for a, b in zip(accs, accs[1:]))
    elapsed = time.time() - t0
    ok = bit_exact and len(contained) == 20 and all(contained) and monotone and elapsed < 120
    verdict(4, ok, f"fgsm == pgd(1 step) bitwise: {bit_exact}; containment after all {len(contained)} iterates: "
                   f"{all(contained)}; clean {row['Clean']:.1f}, PGD5/10/20 = "
                   f"{'/'.join(f'{a:.1f}' for a in accs)}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 5

def test_criterion_05_reduction_to_standard_training():
    t0 = time.time()
    train = synth_dataset("raster-moons", 300, seed=21, noise=0.1)
    cfg = TrainConfig(seed=5, lambda_adv=0.0, lambda_diff=0.0)
    rngs_std, rngs_igam = streams(cfg.seed), streams(cfg.seed)
    std = nn.build(cfg.student_preset, train.image_shape, 2, seed=rngs_std.seed("init.student"))
    opt = nn.SGD(std.trainable(), cfg.lr_student, cfg.momentum)
    teacher = nn.build("small-cnn", train.image_shape, 2, seed=99)
    student = nn.build(cfg.student_preset, train.image_shape, 2, seed=rngs_igam.seed("init.student"))
    trn = IGAMTrainer(student, teacher, tf.make_transform("identity", train.image_shape), cfg, rngs=rngs_igam)

    steps = mismatches = 0
    for _ in range(2):
        order_std = list(minibatches(len(train), cfg.batch_size, rngs_std["data-shuffle"]))
        order_igam = list(minibatches(len(train), cfg.batch_size, trn.rngs["data-shuffle"]))
        for a, b in zip(order_std, order_igam):
            loss = losses.xent(std, train.images[a], train.labels[a])
            opt.step(ad.grad(loss, opt.params))
            row = trn.train_step(train.images[b], train.labels[b])
            steps += 1
            same = (np.array_equal(a, b) and nn.parameter_hash(std) == nn.parameter_hash(student)
                    and row["l_xent"] == loss.item())
            mismatches += not same
    elapsed = time.time() - t0
    ok = mismatches == 0 and steps == 12 and elapsed < 60
    verdict(5, ok, f"{steps} steps, {mismatches} with differing batches, losses or parameter hashes; {elapsed:.1f}s")


# ---------------------------------------------------------------- 6, 7, 8

def _transfer_rows(kind):
    rows = []
    for seed in ex.SEEDS:
        base = ex.baselines(seed)
        run = ex.igam_run(seed, kind)
        rows.append((base["standard_row"], base["at_row"], run["row"]))
    return rows


def _transfer_check(kind, slack):
    rows = _transfer_rows(kind)
    med = {
        "std": ex.median([r[0]["PGD20"] for r in rows]),
        "at": ex.median([r[1]["PGD20"] for r in rows]),
        "igam": ex.median([r[2]["PGD20"] for r in rows]),
        "at_clean": ex.median([r[1]["Clean"] for r in rows]),
        "igam_clean": ex.median([r[2]["Clean"] for r in rows]),
    }
    checks = (med["igam"] >= med["std"] + 15 - slack,
              med["igam"] >= 0.6 * med["at"] - slack,
              med["igam_clean"] >= med["at_clean"] - 5 - slack)
    per_seed = "; ".join(f"seed {s}: std {r[0]['PGD20']:.1f}, PGD7 {r[1]['Clean']:.1f}/{r[1]['PGD20']:.1f}, "
                         f"IGAM {r[2]['Clean']:.1f}/{r[2]['PGD20']:.1f}" for s, r in zip(ex.SEEDS, rows))
    detail = (f"median PGD20 std {med['std']:.1f}, PGD7-trained {med['at']:.1f}, IGAM {med['igam']:.1f}; "
              f"median clean PGD7-trained {med['at_clean']:.1f}, IGAM {med['igam_clean']:.1f} ({per_seed})")
    return all(checks), detail


def test_criterion_06_robustness_transfer():
    t0 = time.time()
    ok, detail = _transfer_check("identity", slack=0.0)
    elapsed = time.time() - t0
    verdict(6, ok and elapsed < 20 * 60, f"{detail}; {elapsed:.0f}s")


def test_criterion_07_gradient_matching_signal():
    parts, ok = [], True
    for seed in ex.SEEDS:
        (cos0, diff0), (cos1, diff1) = ex.igam_run(seed, "identity")["alignment"]
        seed_ok = cos1 - cos0 >= 0.2 and diff1 <= 0.5 * diff0
        ok &= seed_ok
        parts.append(f"seed {seed}: cos {cos0:.3f} -> {cos1:.3f}, L_diff {diff0:.4f} -> {diff1:.4f} "
                     f"(-{100 * (1 - diff1 / diff0):.0f}%)")
    verdict(7, ok, "; ".join(parts))


@pytest.mark.parametrize("kind", ["avgpool_resize", "center_crop"])
def test_criterion_08_cross_dimension_transfer(kind):
    t0 = time.time()
    run = ex.igam_run(ex.SEEDS[0], kind)
    if kind == "center_crop":
        assert run["trainer"].view is not None
        assert run["trainer"].disc.input_shape == (20, 20, 1)
    ok, detail = _transfer_check(kind, slack=5.0)
    verdict(8, ok, f"[{kind}, teacher {run['teacher'].input_shape}] {detail}; {time.time() - t0:.0f}s")


# ---------------------------------------------------------------- 9

class ScaledLogits:
    def __init__(self, model, c):
        self.model, self.c = model, c

    def logits(self, x):
        return self.model.logits(x) * self.c


def test_criterion_09_alignment_sanity():
    rng = np.random.default_rng(0)
    _, test = ex.moons()
    base = ex.baselines(0)
    x0 = test.images[0]
    a = metrics.alignment(base["standard"], x0)
    invariant = all(abs(metrics.alignment(ScaledLogits(base["standard"], c), x0) - a) <= 1e-9 * a
                    for c in (0.5, 3.0, 17.0))

    lin = nn.build("linear", (3, 3, 1), 2, seed=4)
    W = lin.layers[1].w.data
    lin.layers[1].b.data[:] = [5.0, 0.0]  # class 0 on top near the origin
    g = (W[:, 0] - W[:, 1]).reshape(3, 3, 1)
    x_par = 0.3 * g
    r = rng.normal(size=g.shape)
    x_orth = r - (np.sum(r * g) / np.sum(g * g)) * g
    par = metrics.alignment(lin, x_par)
    orth = metrics.alignment(lin, x_orth)
    constructions = abs(par - np.linalg.norm(x_par)) <= 1e-12 and orth <= 1e-12

    imgs = test.images[:100]
    robust = [metrics.mean_alignment(base["at"], imgs)] + [metrics.mean_alignment(ex.baselines(s)["at"], imgs)
                                                           for s in ex.SEEDS[1:]]
    standard = [metrics.mean_alignment(base["standard"], imgs)] + [
        metrics.mean_alignment(ex.baselines(s)["standard"], imgs) for s in ex.SEEDS[1:]]
    directional = np.mean(robust) > np.mean(standard)
    ok = invariant and constructions and directional
    verdict(9, ok, f"scale invariance: {invariant}; parallel alpha {par:.6f} vs |x| {np.linalg.norm(x_par):.6f}, "
                   f"orthogonal alpha {orth:.1e}; mean alpha robust {np.mean(robust):.3f} > standard "
                   f"{np.mean(standard):.3f}: {directional}")


# ---------------------------------------------------------------- 10

TINY = """\
data.n_train = 100
data.n_test = 40
data.height = 12
data.width = 12
train.epochs = 1
igam.epochs = 1
eval.pgd_steps = 2, 3
export.count = 2
landscape.resolution = 5
"""


def _csvs(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*.csv"))}


def test_criterion_10_reproducibility(tmp_path):
    t0 = time.time()

    def run(cmd, text, out):
        cfg = tmp_path / f"{out}.cfg"
        cfg.write_text(text)
        assert cli.main([cmd, "--config", str(cfg), "--out", str(tmp_path / out), "--seed", "3"]) == 0
        return tmp_path / out

    at = run("train-at", TINY, "at")
    std = run("train-standard", TINY, "std")
    teacher = f"teacher.checkpoint = {at / 'model.ckpt'}\n"
    model = f"model.checkpoint = {std / 'model.ckpt'}\n"
    firsts = {
        "train-standard": std,
        "train-at": at,
        "finetune-teacher": run("finetune-teacher", TINY + teacher, "ft"),
        "train-igam": run("train-igam", TINY + teacher, "ig"),
        "evaluate": run("evaluate", TINY + model, "ev"),
        "export-gradients": run("export-gradients", TINY + model, "ex"),
        "landscape": run("landscape", TINY + model, "ls"),
        "report": run("report", f"report.inputs = {at / 'report.csv'}, {std / 'report.csv'}\n", "rep"),
    }
    failures = []
    n_files = 0
    for cmd, out in firsts.items():
        snapshot = (out / "config.resolved").read_text()
        again = tmp_path / (out.name + "_again")
        assert cli.main([cmd, "--config", str(out / "config.resolved"), "--out", str(again)]) == 0
        a, b = _csvs(out), _csvs(again)
        n_files += len(a)
        if not a or a != b or (again / "config.resolved").read_text() != snapshot:
            failures.append(cmd)
    elapsed = time.time() - t0
    verdict(10, not failures, f"{len(firsts)} subcommands rerun from config.resolved, {n_files} CSV files compared, "
                              f"mismatches: {failures or 'none'}; {elapsed:.1f}s")
