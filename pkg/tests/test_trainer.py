"""Trainer unit tests, then desk-scale trend checks on the shared experiment runs."""

import numpy as np
import pytest

import experiments as ex
from igam import losses, metrics, nn, trainer
from igam import transforms as tf
from igam.attacks import AttackConfig, adversarial_train_epoch
from igam.data import synth_dataset
from igam.rng import streams
from igam.trainer import IGAMTrainer, TrainConfig


@pytest.fixture(scope="module")
def small():
    train = synth_dataset("raster-moons", 200, seed=3, height=12, width=12)
    test = synth_dataset("raster-moons", 100, seed=4, height=12, width=12, split="test")
    teacher = trainer.train_standard(train, TrainConfig(seed=1), 2, streams(1))
    return train, test, teacher


def backbone_hash(model):
    head = {id(p) for p in nn.logit_parameters(model)}
    return tuple(p.data.tobytes() for p in model.parameters().values() if id(p) not in head)


def test_config_validation():
    with pytest.raises(ValueError, match="lr_student"):
        TrainConfig(lr_student=0)
    with pytest.raises(ValueError, match="lambda_adv"):
        TrainConfig(lambda_adv=float("inf"))


def test_zero_finetune_epochs_leaves_teacher_unchanged(small):
    train, _, teacher = small
    before = nn.parameter_hash(teacher)
    ft = trainer.finetune_teacher(teacher, tf.make_transform("identity", train.image_shape), train,
                                  TrainConfig(finetune_epochs=0))
    assert nn.parameter_hash(ft) == before == nn.parameter_hash(teacher)
    assert not ft.trainable()


def test_finetune_touches_only_the_head(small):
    train, _, teacher = small
    ft = trainer.finetune_teacher(teacher, tf.make_transform("identity", train.image_shape), train, TrainConfig())
    assert backbone_hash(ft) == backbone_hash(teacher)
    assert nn.parameter_hash(ft) != nn.parameter_hash(teacher)
    assert not ft.trainable()


def test_finetune_rejects_mismatched_transform(small):
    train, _, teacher = small
    t = tf.make_transform("avgpool_resize", train.image_shape, (6, 6, 1))
    with pytest.raises(Exception, match="teacher expects"):
        trainer.finetune_teacher(teacher, t, train, TrainConfig())


def test_student_equal_to_teacher_has_zero_l_diff(small):
    train, _, teacher = small
    cfg = TrainConfig(lambda_diff=1e4)
    student = teacher.copy(name="student")
    for p in student.parameters().values():
        p.unfreeze()
    trn = IGAMTrainer(student, teacher.copy().freeze(), tf.make_transform("identity", train.image_shape), cfg)
    row = trn.train_step(train.images[:50], train.labels[:50])
    assert row["l_diff"] == 0.0
    assert row["cos_sim"] == pytest.approx(1.0, abs=1e-12)


def test_transpose_conv_adapter_stays_frozen_during_igam():
    train = synth_dataset("raster-moons", 100, seed=5, height=8, width=8)
    teacher = nn.build("small-cnn", (16, 16, 1), 2, seed=0).freeze()
    t = tf.make_transform("transpose_conv", train.image_shape, (16, 16, 1), seed=3)
    cfg = TrainConfig(seed=0, igam_epochs=1)
    adapter_before = [p.data.copy() for p in t.parameters()]
    student, ft, trn = trainer.train_igam(teacher, train, cfg, t, streams(0))
    trained = [p.data.copy() for p in t.parameters()]
    assert any(not np.array_equal(a, b) for a, b in zip(adapter_before, trained))
    assert all(p.frozen for p in t.parameters())
    trn.epoch(train)
    assert all(np.array_equal(a, p.data) for a, p in zip(trained, t.parameters()))


def test_mutated_teacher_is_detected(small):
    train, _, teacher = small
    trn = IGAMTrainer(nn.build("small-cnn", train.image_shape, 2, seed=9), teacher.copy(),
                      tf.make_transform("identity", train.image_shape), TrainConfig())
    next(iter(trn.teacher.parameters().values())).data[...] += 1.0
    with pytest.raises(trainer.TeacherMutated):
        trn.train_step(train.images[:10], train.labels[:10])


def test_runlog_csv_round_trip(tmp_path):
    log = trainer.RunLog()
    log.append(step=0, l_xent=0.7, l_adv=-1.38, l_diff=0.01, disc_acc=0.5, cos_sim=0.1)
    log.append(step=1, l_xent=0.6, l_adv=-1.39, l_diff=0.005, disc_acc=0.5, cos_sim=1 / 3)
    log.to_csv(tmp_path / "r.csv")
    assert trainer.RunLog.from_csv(tmp_path / "r.csv").records == log.records
    with pytest.raises(ValueError):
        log.append(step=1, l_xent=0, l_adv=0, l_diff=0, disc_acc=0, cos_sim=0)


def test_run_experiment_is_deterministic(small):
    train, test, teacher = small
    cfg = TrainConfig(seed=2, igam_epochs=1)
    attacks = metrics.standard_attacks(0.1, (3,))
    a = trainer.run_experiment(cfg, teacher, train, test, "igam", attacks)
    b = trainer.run_experiment(cfg, teacher, train, test, "igam", attacks)
    assert a.report == b.report
    assert a.report.columns == ["Clean", "FGSM", "PGD3", "cos_sim"]
    assert [r["l_xent"] for r in a.log.records] == [r["l_xent"] for r in b.log.records]
    ft = trainer.run_experiment(cfg, teacher, train, test, "ft", attacks)
    assert list(ft.report.rows) == ["FT"] and isinstance(ft.model, trainer.AdaptedModel)
    with pytest.raises(ValueError):
        trainer.run_experiment(cfg, None, train, test, "igam")


def test_adversarial_loss_decreases(small):
    train, _, _ = small
    model = nn.build("small-cnn", train.image_shape, 2, seed=0)
    opt = nn.SGD(model.trainable(), 0.01, 0.9)
    rngs = streams(0)
    cfg = AttackConfig(0.1, 3, 0.025, random_start=True)
    epoch_losses = [adversarial_train_epoch(model, train, cfg, opt, 50, rngs["shuffle"], rngs["attack"])
                    for _ in range(4)]
    assert epoch_losses[-1] < epoch_losses[0]


# ---------------------------------------------------------------- trends on the shared runs

def test_trend_adversarial_training_beats_standard():
    base = ex.baselines(0)
    assert base["at_row"]["PGD20"] >= base["standard_row"]["PGD20"] + 20
    assert base["standard_row"]["PGD20"] < base["standard_row"]["Clean"]


def test_trend_finetuning_on_source_task_keeps_accuracy():
    _, test = ex.moons()
    at = ex.baselines(0)["at"]
    ft = ex.igam_run(0)["teacher"]
    assert abs(metrics.accuracy(ft, test.images, test.labels) - metrics.accuracy(at, test.images, test.labels)) <= 2


def test_trend_student_loss_falls():
    l_xent = ex.igam_run(0)["trainer"].log.column("l_xent")
    assert l_xent[-20:].mean() < l_xent[:20].mean()


@pytest.mark.xfail(strict=True, reason="not reproduced on blurred two-moons: signed lag-1 autocorrelation is "
                                      "about 0.89 for PGD7 models vs 0.91-0.92 for standard ones on every seed")
def test_trend_robust_gradients_are_smoother():
    _, test = ex.moons()
    x, y = test.images[:100], test.labels[:100]
    base = ex.baselines(0)
    smooth = {k: metrics.gradient_smoothness(losses.input_gradient(base[k], x, y).data) for k in ("at", "standard")}
    assert smooth["at"] > smooth["standard"]


def test_trend_igam_landscape_is_flatter():
    _, test = ex.moons()
    cfg = AttackConfig(ex.EPS, 10, ex.EPS / 4)
    peaks = {}
    for key, model in (("igam", ex.igam_run(0)["student"]), ("standard", ex.baselines(0)["standard"])):
        vals = []
        for i in range(5):
            rng = np.random.default_rng(i)
            adv, rnd = metrics.landscape_directions(model, test.images[i], test.labels[i], cfg, rng)
            grid = metrics.loss_landscape_grid(model, test.images[i], test.labels[i], adv, rnd, ex.EPS, 9)
            vals.append(grid["loss"].max())
        peaks[key] = np.mean(vals)
    assert peaks["igam"] < peaks["standard"]
