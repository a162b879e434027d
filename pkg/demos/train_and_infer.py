"""
Train a small model, then label held-out scans end to end
=========================================================

About a minute on one CPU core: twenty phantoms, a narrow network and eight
epochs.  The trained model slides over unseen scans; votes from every window
are pooled per class into one centroid.  Accuracy from a run this short falls well
below the full desk setup (40 phantoms, 12 epochs) used by the acceptance suite.
"""
import logging
import tempfile
import time

from vertlabel.data import CLASS_NAMES
from vertlabel.evaluation import format_metrics_table, predict_scan, write_predictions
from vertlabel.experiment import DeskData, DeskSetup, scan_metrics, train_setup
from vertlabel.training import load_checkpoint

logging.basicConfig(level=logging.INFO, format="%(message)s")

setup = DeskSetup(num_phantoms=20, num_val=2, num_test=3, epochs=8)
data = DeskData(setup)
print(f"{len(data.dataset.train)} training crops, {len(data.dataset.val)} validation crops")

out = tempfile.mkdtemp(prefix="vertlabel-demo-")
t0 = time.perf_counter()
result = train_setup(setup, data, out_dir=out)
print(f"trained in {time.perf_counter() - t0:.0f}s; checkpoints and losses.csv in {out}")
for row in result.log:
    print("  ", row)

# reload from disk, exactly as the CLI would
model = load_checkpoint(f"{out}/best.ckpt").build_model()

vol, labels = data.test_scans[0]
pred = predict_scan(vol, model)
write_predictions(f"{out}/scan0.txt", pred)
print(f"\nscan 0: {len(pred.votes)} votes ->", {CLASS_NAMES[c]: xyz.round(1).tolist()
                                              for c, xyz in pred.present().items()})
print("truth  :", {CLASS_NAMES[c]: xyz.round(1).tolist() for c, xyz in labels.as_dict().items()})

print()
print(format_metrics_table(scan_metrics(model, data)))
