"""Transfer PGD robustness from a teacher to a student that never sees an adversarial example.

Run with ``python3 demos/robustness_transfer.py``; takes about two minutes.

The story:
1. Train a plain student and a PGD7-trained teacher on rasterized two-moons.
2. Finetune the teacher's logit layer on the student's task (here the same task).
3. Train a fresh student with IGAM: cross-entropy plus a discriminator that tries
   to tell teacher input gradients from student ones, plus an l2 gradient match.
4. Attack all three with FGSM and PGD and compare.
"""

import time

from igam import metrics, trainer, transforms
from igam.attacks import AttackConfig
from igam.data import synth_dataset
from igam.rng import streams

EPS = 0.1
SEED = 0

train = synth_dataset("raster-moons", 1000, seed=1, noise=0.1)
test = synth_dataset("raster-moons", 300, seed=2, noise=0.1, split="test")
cfg = trainer.TrainConfig(seed=SEED)
attacks = metrics.standard_attacks(EPS)
report = metrics.EvalReport()

t0 = time.time()
standard = trainer.train_standard(train, cfg, 10, streams(SEED))
report.add("Standard", metrics.evaluate(standard, test, attacks, seed=SEED))
print(f"standard model trained ({time.time() - t0:.0f}s)")

# The teacher pays the cost of PGD in its inner loop; the student never will.
pgd7 = AttackConfig(EPS, 7, EPS / 4, random_start=True)
teacher = trainer.train_adversarial(train, cfg, pgd7, 5, streams(SEED))
report.add("PGD7-trained", metrics.evaluate(teacher, test, attacks, seed=SEED))
print(f"PGD7 teacher trained ({time.time() - t0:.0f}s)")

identity = transforms.make_transform("identity", train.image_shape)
student, ft_teacher, trn = trainer.train_igam(teacher, train, cfg, identity, streams(SEED), eval_set=test)
row = metrics.evaluate(student, test, attacks, seed=SEED)
report.add("IGAM", row)
print(f"IGAM student trained ({time.time() - t0:.0f}s)")

(cos0, diff0), (cos1, diff1) = trn.initial_alignment, trn.final_alignment
print(f"\nteacher/student gradient cosine {cos0:.3f} -> {cos1:.3f}, mean L_diff {diff0:.4f} -> {diff1:.4f}")
print(f"discriminator accuracy over the last 50 steps: {trn.log.column('disc_acc')[-50:].mean():.2f}\n")
print(report.format_table())
