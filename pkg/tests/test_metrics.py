import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crackrcnn.metrics import (
    ConfusionCounts,
    GroundTruth,
    box_iou,
    coco_ap,
    confusion,
    image_has_detection,
    mask_iou,
    prf_accuracy,
)
from generators import Det, random_ap_instance
from oracles import coco_ap_oracle, iou_mask


def rect_mask(box, size=64):
    m = np.zeros((size, size), bool)
    m[box[1] : box[3], box[0] : box[2]] = True
    return m


def det(box, score, size=64):
    return Det(box, score, rect_mask(box, size))


def gt(box, size=64):
    return GroundTruth(box, rect_mask(box, size))


# -- IoU -----------------------------------------------------------------------


def test_box_iou_basic():
    assert box_iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert box_iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0


def test_box_iou_against_fine_grid():
    n = 1000
    centres = (np.arange(n) + 0.5) * 3 / n
    xx, yy = np.meshgrid(centres, centres)
    in_a = (xx < 2) & (yy < 2)
    in_b = (xx > 1) & (yy > 1)
    grid = (in_a & in_b).sum() / (in_a | in_b).sum()
    assert abs(box_iou((0, 0, 2, 2), (1, 1, 3, 3)) - grid) < 1e-3
    assert box_iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


def test_box_iou_degenerate():
    with pytest.raises(ValueError):
        box_iou((0, 0, 0, 2), (0, 0, 1, 1))


def test_mask_iou(rng):
    for _ in range(20):
        a, b = rng.random((12, 12)) < 0.4, rng.random((12, 12)) < 0.4
        assert mask_iou(a, b) == iou_mask(a, b) == mask_iou(b, a)
    m = rng.random((5, 5)) < 0.5
    m[0, 0] = True
    assert mask_iou(m, m) == 1.0
    assert mask_iou(m, ~m) == 0.0
    with pytest.raises(ValueError):
        mask_iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool))


# -- COCO AP -------------------------------------------------------------------


def test_perfect_single_match():
    r = coco_ap([[det((4, 4, 20, 20), 0.9)]], [[gt((4, 4, 20, 20))]], "box")
    assert r.ap == r.ap50 == r.ap75 == 100.0
    assert r.ap_s == 100.0 and r.ap_m is None and r.ap_l is None


def test_no_detections_is_zero():
    r = coco_ap([[]], [[gt((4, 4, 20, 20))]], "mask")
    assert r.ap == r.ap50 == r.ap75 == r.ap_s == 0.0


def test_hit_miss_hit():
    gts = [gt((0, 0, 10, 10)), gt((30, 30, 40, 40))]
    dets = [det((0, 0, 10, 10), 0.9), det((50, 50, 60, 60), 0.8), det((30, 30, 40, 40), 0.7)]
    r = coco_ap([dets], [gts], "box")
    expected = 100 * (51 * 1.0 + 50 * (2 / 3)) / 101
    assert r.ap50 == pytest.approx(expected, abs=1e-12)
    assert round(r.ap50, 1) == 83.5
    assert r.ap50 == coco_ap_oracle([dets], [gts], "box")["ap50"]


def test_no_ground_truth_raises():
    with pytest.raises(ValueError):
        coco_ap([[det((0, 0, 4, 4), 0.5)]], [[]])


def test_size_bands_use_gt_area():
    small, medium = gt((0, 0, 10, 10), 128), gt((0, 20, 40, 60), 128)
    dets = [Det(small.box, 0.9, small.mask), Det(medium.box, 0.8, medium.mask)]
    r = coco_ap([dets], [[small, medium]], "box")
    assert r.ap_s == 100.0 and r.ap_m == 100.0 and r.ap_l is None


def test_band_edges_inclusive():
    # a 32 x 32 box sits exactly on the small/medium edge and counts in both
    g = gt((0, 0, 32, 32))
    r = coco_ap([[Det(g.box, 0.9, g.mask)]], [[g]], "box")
    assert r.ap_s == 100.0 and r.ap_m == 100.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["box", "mask"]))
def test_matches_exhaustive_oracle(seed, variant):
    dets, gts = random_ap_instance(np.random.default_rng(seed))
    got = coco_ap(dets, gts, variant).as_dict()
    want = coco_ap_oracle(dets, gts, variant)
    for k, v in want.items():
        assert got[k] == v, k


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_invariant_under_monotone_score_map(seed):
    dets, gts = random_ap_instance(np.random.default_rng(seed))
    warped = [[Det(d.box, 1 / (1 + math.exp(-7 * d.score + 2)), d.mask) for d in ds] for ds in dets]
    assert coco_ap(dets, gts, "mask") == coco_ap(warped, gts, "mask")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_image_order_irrelevant_for_distinct_scores(seed):
    # tied scores across images rank in image order, as in the COCO reference
    rng = np.random.default_rng(seed)
    dets, gts = random_ap_instance(rng)
    dets = [[Det(d.box, d.score + 1e-3 * rng.random(), d.mask) for d in ds] for ds in dets]
    perm = rng.permutation(len(dets))
    assert coco_ap(dets, gts, "box") == coco_ap([dets[i] for i in perm], [gts[i] for i in perm], "box")


def test_values_in_range(rng):
    for _ in range(20):
        dets, gts = random_ap_instance(rng)
        for v in coco_ap(dets, gts, "box").as_dict().values():
            assert v is None or isinstance(v, str) or 0.0 <= v <= 100.0


# -- image-level criterion and ratios ---------------------------------------


def test_image_has_detection():
    d = det((0, 0, 4, 4), 0.25)
    assert not image_has_detection([], 0.2)
    assert image_has_detection([d], 0.2)
    assert not image_has_detection([d], 0.5)


def test_confusion_direct_count():
    d = [det((0, 0, 4, 4), 0.9)]
    preds = {1: d, 2: [], 3: d, 4: []}
    labels = {1: True, 2: True, 3: False, 4: False}
    assert confusion(preds, labels, 0.5) == ConfusionCounts(tp=1, fp=1, fn=1, tn=1)


def test_confusion_all_correct():
    d = [det((0, 0, 4, 4), 0.9)]
    c = confusion({1: d, 2: []}, {1: True, 2: False}, 0.5)
    assert c.fp == c.fn == 0


def test_confusion_id_mismatch():
    with pytest.raises(ValueError):
        confusion({1: []}, {2: True}, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_confusion_matches_scan_and_is_monotone(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 30))
    preds = {i: [det((0, 0, 2, 2), float(s)) for s in rng.random(int(rng.integers(0, 3)))] for i in range(n)}
    labels = {i: bool(rng.random() < 0.5) for i in range(n)}
    thr = float(rng.random())
    tally = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    for i in range(n):
        hit = any(d.score >= thr for d in preds[i])
        tally[("t" if hit == labels[i] else "f") + ("p" if hit else "n")] += 1
    c = confusion(preds, labels, thr)
    assert c == ConfusionCounts(**tally) and c.total == n
    lower = confusion(preds, labels, thr / 2)
    assert lower.tp >= c.tp and lower.tn <= c.tn


def test_confusion_reduction_is_associative():
    a, b, c = ConfusionCounts(1, 2, 3, 4), ConfusionCounts(5, 0, 1, 0), ConfusionCounts(0, 0, 0, 9)
    assert (a + b) + c == a + (b + c) == ConfusionCounts(6, 2, 4, 13)


def test_prf_direct_substitution():
    assert prf_accuracy(ConfusionCounts(tp=3, fn=1)) == {"recall": 0.75, "precision": 1.0, "accuracy": 0.75}


def test_prf_undefined_precision():
    r = prf_accuracy(ConfusionCounts(tp=0, fp=0, fn=5, tn=5))
    assert r == {"recall": 0.0, "precision": None, "accuracy": 0.5}


def test_prf_empty_raises():
    with pytest.raises(ValueError):
        prf_accuracy(ConfusionCounts())


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1)
