"""Scoring a noisy tracker with MPR, MSR and NPR, with one or two ground truths.

Run:  python demos/03_evaluation.py
"""

import numpy as np

from misskit.metrics import evaluate_sequence, precision_curve, success_curve

rng = np.random.default_rng(1)
n = 300
gt_rgb = np.column_stack([rng.uniform(50, 400, (n, 2)), rng.uniform(20, 60, (n, 2))])
# thermal ground truth is offset by a few pixels, as with imperfect registration
gt_tir = gt_rgb + np.r_[4.0, -3.0, 0.0, 0.0]

for noise in (2.0, 10.0, 30.0):
    pred = gt_rgb + np.column_stack([rng.normal(0, noise, (n, 2)), rng.normal(0, noise / 4, (n, 2))])
    single = evaluate_sequence("s", pred, [gt_rgb]).scalars
    dual = evaluate_sequence("s", pred, [gt_rgb, gt_tir]).scalars
    print(f"noise {noise:4.0f}px  single GT " + "  ".join(f"{k} {v:.3f}" for k, v in single.items()))
    print(f"              dual GT   " + "  ".join(f"{k} {v:.3f}" for k, v in dual.items()))

# %% The curves behind the scalars.
p = precision_curve(pred, gt_rgb)
s = success_curve(pred, gt_rgb)
print("precision at 0, 10, 20, 30 px:", p.values[[0, 10, 20, 30]].round(3))
print("success at IoU 0, .25, .5, .75:", s.values[[0, 5, 10, 15]].round(3))
