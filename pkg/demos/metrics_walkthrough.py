"""
Identification rate, localization error and average precision
==============================================================

A vertebra counts as identified when the nearest predicted centroid has the
right class and sits within 20 mm.  Localization error compares each
predicted class with the ground truth of the same class.
"""
import numpy as np

from vertlabel.data import CLASS_NAMES, LabelSet
from vertlabel.evaluation import (average_precision, format_metrics_table,
                                  identification_metrics, mean_average_precision)

truth = LabelSet([0, 1, 2, 8, 20], np.array([[0, 0, 0], [0, 0, 20], [0, 0, 40],
                                             [5, 0, 160], [2, 0, 400]], dtype=float))
pred = {
    0: (3, 4, 0),      # 5 mm off: identified
    1: (0, 0, 32),     # 12 mm off but still the nearest: identified
    5: (0, 0, 41),     # wrong class next to C3, so C3 is missed
    8: (5, 0, 185),    # 25 mm off: localized but not identified
    20: (2, 0, 400),   # exact
}
report = identification_metrics([pred], [truth])
print(format_metrics_table(report))
print("per-vertebra errors (mm):", report.errors_mm)

# average precision walks down the ranking; tied scores enter together
labels = [1, 0, 1]
scores = [0.9, 0.5, 0.1]
print(f"\nAP of {labels} ranked by {scores}: {average_precision(labels, scores):.4f}")

# mean AP over classes skips any class without a positive crop
rng = np.random.default_rng(0)
u = rng.integers(0, 2, size=(40, 4))
u[:, 3] = 0
p = np.clip(u * 0.3 + rng.uniform(0, 0.6, size=u.shape), 0, 1)  # overlapping scores
m, per_class, skipped = mean_average_precision(p, u)
print("per-class AP:", {CLASS_NAMES[k]: round(v, 3) for k, v in per_class.items()}, "mAP", round(m, 4))
print("skipped (no positives):", [CLASS_NAMES[k] for k in skipped])
