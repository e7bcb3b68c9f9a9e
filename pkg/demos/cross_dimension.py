"""IGAM across input sizes: a 14x14 robust teacher guiding a 28x28 student.

Run with ``python3 demos/cross_dimension.py [avgpool_resize|center_crop]``.

The teacher only ever sees downsampled (or cropped) images. During IGAM the
student's 28x28 batch goes through the same transform before reaching the
teacher, and the teacher's input gradient is pulled back through it, so both
gradients live on the student's 28x28 grid. For a crop the discriminator
compares only the cropped window, where the teacher gradient is nonzero.
"""

import sys

import numpy as np

from igam import autodiff as ad
from igam import losses, metrics, trainer, transforms
from igam.attacks import AttackConfig
from igam.data import Dataset, synth_dataset
from igam.rng import streams

EPS = 0.1
SEED = 0
kind = sys.argv[1] if len(sys.argv) > 1 else "avgpool_resize"
source = {"avgpool_resize": (14, 14, 1), "center_crop": (20, 20, 1)}[kind]

train = synth_dataset("raster-moons", 1000, seed=1, noise=0.1)
test = synth_dataset("raster-moons", 300, seed=2, noise=0.1, split="test")
t = transforms.make_transform(kind, train.image_shape, source)
cfg = trainer.TrainConfig(seed=SEED)

with ad.no_grad():
    small = Dataset(t.apply(train.images).data, train.labels, train.num_classes)
teacher = trainer.train_adversarial(small, cfg, AttackConfig(EPS, 7, EPS / 4, random_start=True), 10,
                                    streams(SEED), name=f"pgd7-{source[0]}x{source[1]}")
print(f"{source[0]}x{source[1]} PGD7 teacher trained; discriminator input shape {transforms.disc_input_shape(t)}")

student, ft, trn = trainer.train_igam(teacher, train, cfg, t, streams(SEED), eval_set=test)
report = metrics.EvalReport()
report.add("FT (adapted)", metrics.evaluate(trainer.AdaptedModel(ft, t), test, metrics.standard_attacks(EPS)))
report.add("IGAM", metrics.evaluate(student, test, metrics.standard_attacks(EPS)))
print(report.format_table())

# Where does the student's gradient mass sit? For the crop it should concentrate inside the window.
J = np.abs(losses.input_gradient(student, test.images[:100], test.labels[:100]).data)
if kind == "center_crop":
    inside = transforms.crop_for_discriminator(J, t)
    print(f"share of |J_s| inside the crop window: {inside.sum() / J.sum():.2f}")
