"""Small worked examples of the evaluation arithmetic.

    python demos/metrics_walkthrough.py
"""
import numpy as np

from crackrcnn.heads import Detection
from crackrcnn.metrics import ConfusionCounts, GroundTruth, coco_ap, confusion, prf_accuracy


def rect(box, size=64):
    m = np.zeros((size, size), bool)
    m[box[1] : box[3], box[0] : box[2]] = True
    return m


def det(box, score):
    return Detection(box, score, rect(box), raw_mask=None)


# Two cracks, three detections: hit, false alarm, hit.
gts = [GroundTruth((0, 0, 10, 10), rect((0, 0, 10, 10))), GroundTruth((30, 30, 40, 40), rect((30, 30, 40, 40)))]
dets = [det((0, 0, 10, 10), 0.9), det((50, 50, 60, 60), 0.8), det((30, 30, 40, 40), 0.7)]
ap = coco_ap([dets], [gts], "mask")
print("hit / miss / hit")
print("  precision runs 1, 1/2, 2/3 while recall climbs 0.5, 0.5, 1.0")
print(f"  101-point AP50 = {ap.ap50:.2f}  (51 points at 1.0, 50 at 2/3)")

# Image-level criterion: an image counts as cracked when any detection clears the threshold.
preds = {1: dets, 2: [], 3: [det((5, 5, 9, 9), 0.3)]}
labels = {1: True, 2: False, 3: False}
for thr in (0.5, 0.2):
    c = confusion(preds, labels, thr)
    print(f"threshold {thr}: {c}  ->  {prf_accuracy(c)}")

# Counts on a 1,130 crack / 1,502 background test set.
c = ConfusionCounts(tp=765, fn=365, fp=163, tn=1339)
r = prf_accuracy(c)
print("1,130 + 1,502 images:", {k: f"{100 * v:.1f}%" for k, v in r.items()})
