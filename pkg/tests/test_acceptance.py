"""Acceptance criteria 1-10.

Each test records one ``criterion N: PASS|FAIL`` line; the lines are
printed together at the end of the pytest run (see ``conftest.py``) and
when this file is executed directly.
"""
import time

import numpy as np
import pytest
import torch

from conftest import tiny_config
from crackrcnn.augment import AugmentOp, AugmentPolicy, apply
from crackrcnn.backbones import (
    APANet,
    BackboneConfig,
    HRNet,
    SpatialAttention,
    build_backbone,
)
from crackrcnn.checkpoint import save_checkpoint
from crackrcnn.config import RunConfig
from crackrcnn.heads import paste_mask
from crackrcnn.metrics import ConfusionCounts, coco_ap, prf_accuracy
from crackrcnn.model import HeadConfig, MaskRCNN
from crackrcnn.ops import roi_align
from crackrcnn.pipeline import evaluate, train
from crackrcnn.synthetic import write_dataset
from generators import random_ap_instance, random_policy, random_sample
from oracles import coco_ap_oracle, finite_difference_check, roi_align_dense

RESULTS = []


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# 1 ----------------------------------------------------------------------------


def test_criterion_01_metric_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    mismatches = 0
    for trial in range(200):
        dets, gts = random_ap_instance(rng, max_images=5, max_instances=5)
        for variant in ("box", "mask"):
            got = coco_ap(dets, gts, variant).as_dict()
            want = coco_ap_oracle(dets, gts, variant)
            mismatches += any(got[k] != v for k, v in want.items())
    elapsed = time.time() - t0
    record(1, mismatches == 0 and elapsed < 60,
           f"200 trials x 2 variants, {mismatches} mismatches, {elapsed:.1f}s")


# 2 ----------------------------------------------------------------------------


def test_criterion_02_prf_round_trip():
    c = ConfusionCounts(tp=765, fn=365, fp=163, tn=1339)
    r = prf_accuracy(c)
    rec, prec, acc = 100 * r["recall"], 100 * r["precision"], 100 * r["accuracy"]
    ok = (
        c.total == 2632 and c.tp + c.fn == 1130 and c.fp + c.tn == 1502
        and round(rec, 1) == 67.7 and round(prec, 1) == 82.4 and abs(acc - 75.1) <= 0.5
    )
    record(2, ok, f"recall {rec:.1f}% (want 67.7), precision {prec:.1f}% (want 82.4), "
                  f"accuracy {acc:.1f}% (want 75.1 +/- 0.5)")


# 3 ----------------------------------------------------------------------------


def test_criterion_03_roi_align():
    rng = np.random.default_rng(3)
    worst = 0.0
    worst_sparse = 0.0
    for _ in range(100):
        c, h, w = int(rng.integers(1, 4)), int(rng.integers(2, 12)), int(rng.integers(2, 12))
        k = int(rng.integers(1, 4))
        scale = float(rng.choice([1.0, 0.5, 0.25]))
        f = rng.normal(size=(c, h, w))
        x1, y1 = rng.uniform(-2, w / scale), rng.uniform(-2, h / scale)
        roi = [x1, y1, x1 + rng.uniform(0.5, w / scale), y1 + rng.uniform(0.5, h / scale)]
        dense = roi_align_dense(f, roi, k, scale, grid=100)
        got = roi_align(torch.tensor(f), [roi], k, scale, samples_per_bin=100)[0].numpy()
        worst = max(worst, float(np.abs(got - dense).max()))
        # the default 2 x 2 sampling lattice against the same oracle at grid 2
        got2 = roi_align(torch.tensor(f), [roi], k, scale, samples_per_bin=2)[0].numpy()
        worst_sparse = max(worst_sparse, float(np.abs(got2 - roi_align_dense(f, roi, k, scale, grid=2)).max()))
    const_ok = True
    for v in (0.0, -3.25, 7.5, 1e6):
        f = torch.full((2, 7, 9), v, dtype=torch.float64)
        rois = [[-4.0, -4.0, 40.0, 40.0], [1.3, 2.7, 1.4, 2.9], [3.0, 0.5, 8.75, 6.0]]
        out = roi_align(f, rois, 4, 1.0, 3)
        const_ok &= bool((out == v).all())
    record(3, worst <= 1e-3 and worst_sparse <= 1e-3 and const_ok,
           f"max |dense oracle diff| {worst:.2e} (100x100 lattice), {worst_sparse:.2e} (2x2), "
           f"constant field exact: {const_ok}")


# 4 ----------------------------------------------------------------------------


def _gradient_setup(kind, seed=0):
    torch.manual_seed(seed)
    bb = BackboneConfig(kind=kind, base_channels=4, depth=1, out_channels=8, attention_enabled=kind == "a_panet")
    heads = HeadConfig(rpn_batch=32, roi_batch=16, hidden=16, mask_pool=7)
    model = MaskRCNN(bb, heads).double()
    rng = np.random.default_rng(seed)
    images = torch.tensor(rng.normal(size=(1, 3, 64, 64)))
    gt = np.array([[8.0, 10.0, 30.0, 40.0], [36.0, 20.0, 60.0, 34.0]])
    masks = torch.zeros(2, 64, 64, dtype=torch.bool)
    masks[0, 12:38, 12:26] = True
    masks[1, 22:32, 38:58] = True
    targets = [{"boxes": torch.tensor(gt), "masks": masks}]
    background = np.tile(rng.uniform(0, 40, (8, 2)), 2) + np.array([0, 0, 20, 20])
    jitter = np.concatenate([np.repeat(gt, 6, axis=0) + rng.uniform(-4, 4, (12, 4)), background])
    jitter[:, 2:] = np.maximum(jitter[:, 2:], jitter[:, :2] + 2)
    proposals = [torch.tensor(np.clip(jitter, 0, 64))]
    return model, lambda: model.losses(images, targets, seed=7, proposals=proposals).total()


@pytest.mark.parametrize("kind", ["resnet_fpn", "a_panet", "hrnet"])
def test_criterion_04_gradient_check(kind):
    t0 = time.time()
    model, loss_fn = _gradient_setup(kind)
    n_params = sum(p.numel() for p in model.parameters())
    err, n = finite_difference_check(loss_fn, model.parameters(), fraction=0.01, step=1e-5, seed=1)
    elapsed = time.time() - t0
    record(4, err < 1e-4 and elapsed < 300,
           f"[{kind}] relative error {err:.2e} over {n} of {n_params} parameters, {elapsed:.1f}s")


# 5 ----------------------------------------------------------------------------


def test_criterion_05_attention():
    rng = np.random.default_rng(5)
    torch.manual_seed(5)
    worst_sum, worst_const = 0.0, 0.0
    for _ in range(20):
        c, h, w = int(rng.integers(1, 9)), int(rng.integers(1, 17)), int(rng.integers(1, 17))
        att = SpatialAttention(c).double()
        with torch.no_grad():
            for p in att.parameters():
                p.copy_(torch.tensor(rng.normal(scale=3.0, size=p.shape)))
            x = torch.tensor(rng.normal(scale=5.0, size=(2, c, h, w)))
            worst_sum = max(worst_sum, float((att.gate(x).sum(dim=(1, 2, 3)) - h * w).abs().max()))
            const = torch.tensor(rng.normal(size=(2, c, 1, 1))).expand(2, c, h, w).contiguous()
            worst_const = max(worst_const, float((att(const) - const).abs().max()))
    net = APANet(4, 1, 8, attention_enabled=False).double()
    x = torch.tensor(rng.normal(size=(2, 3, 64, 64)))
    with torch.no_grad():
        got = net(x)
        plain = net.bottom_up(net.fpn(x))
    bitwise = all(a.numpy().tobytes() == b.numpy().tobytes() for a, b in zip(got.levels, plain.levels))
    record(5, worst_sum <= 1e-5 and worst_const <= 1e-6 and bitwise,
           f"max |sum A - HW| {worst_sum:.1e}, constant-input drift {worst_const:.1e}, "
           f"disabled == plain PANet bitwise: {bitwise}")


# 6 ----------------------------------------------------------------------------


def test_criterion_06_shapes():
    torch.manual_seed(6)
    x = torch.randn(1, 3, 256, 256)
    with torch.no_grad():
        branches = [tuple(b.shape[1:]) for b in HRNet(8, 1, 16).branches(x)]
        ok = branches == [(8, 64, 64), (16, 32, 32), (32, 16, 16), (64, 8, 8)]
        details = [f"hrnet branches {branches}"]
        for kind in ("resnet_fpn", "a_panet", "hrnet"):
            pyr = build_backbone(BackboneConfig(kind=kind, out_channels=16, attention_enabled=kind == "a_panet"))(x)
            shapes = [tuple(l.shape[1:]) for l in pyr.levels]
            ok &= pyr.strides == [4, 8, 16, 32]
            ok &= shapes == [(16, 256 // s, 256 // s) for s in (4, 8, 16, 32)]
            details.append(f"{kind} strides {pyr.strides}")
    record(6, ok, "; ".join(details))


# 7 ----------------------------------------------------------------------------


def test_criterion_07_threshold_semantics():
    rng = np.random.default_rng(7)
    torch.manual_seed(7)
    model = MaskRCNN(BackboneConfig(kind="a_panet", base_channels=4, out_channels=8),
                     HeadConfig(hidden=16, rpn_post_nms_test=30)).eval()
    det_violations = mask_violations = 0
    n_pred = n_high = 0
    for _ in range(50):
        image = torch.tensor(rng.normal(size=(1, 3, 64, 64)), dtype=torch.float32)
        low = model.predict(image, score_threshold=0.2, mask_threshold=0.05)[0]
        high = model.predict(image, score_threshold=0.5, mask_threshold=0.5)[0]
        n_pred += len(low)
        n_high += len(high)
        low_by_box = {d.box: d for d in low}
        for d in high:
            det_violations += d.box not in low_by_box
        for d in low:
            m05 = paste_mask(d.raw_mask, d.box, 64, 64, 0.5)
            mask_violations += bool((m05 & ~d.mask).any())
    ok = det_violations == 0 and mask_violations == 0 and n_high < n_pred
    record(7, ok, f"50 images, {n_pred} detections at 0.2 / {n_high} at 0.5, "
                  f"{det_violations} set violations, {mask_violations} mask violations")


# 8 ----------------------------------------------------------------------------


def test_criterion_08_augmentation_consistency():
    rng = np.random.default_rng(8)
    bbox_bad = count_bad = 0
    instances = 0
    for k in range(500):
        s = random_sample(rng)
        pol = random_policy(rng)
        out = apply(pol, s, pol.rng(k))
        for m, b in zip(out.masks, out.boxes):
            ys, xs = np.nonzero(m)
            brute = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])
            bbox_bad += bool(np.abs(brute - b).max() > 1)
            instances += 1
        lossless = AugmentPolicy(tuple(op for op in pol.ops if op.kind != "random_crop")
                                 + (AugmentOp("hflip", 1.0), AugmentOp("vflip", 1.0)), pol.seed)
        flipped = apply(lossless, s, lossless.rng(k))
        count_bad += not np.array_equal(flipped.masks.sum(axis=(1, 2)), s.masks.sum(axis=(1, 2)))
    record(8, bbox_bad == 0 and count_bad == 0,
           f"500 draws, {instances} instances, {bbox_bad} bbox disagreements, {count_bad} pixel-count changes")


# 9 ----------------------------------------------------------------------------

OVERFIT_EPOCHS = 300  # one full-batch step per epoch, so 300 iterations


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["a_panet", "hrnet"])
def test_criterion_09_overfit(kind, tmp_path):
    t0 = time.time()
    split = write_dataset(str(tmp_path), n_images=5, seed=1)
    cfg = RunConfig(
        backbone=BackboneConfig(kind=kind, attention_enabled=kind == "a_panet"),
        augment=AugmentPolicy(()),
        lr=0.02,
        batch_size=5,
        epochs=OVERFIT_EPOCHS,
        seed=0,
    )
    result = train(cfg, split, train_root=str(tmp_path))
    rep = evaluate(result.last, split, cfg, image_root=str(tmp_path))
    elapsed = time.time() - t0
    ok = rep.mask.ap50 >= 90 and rep.rates["accuracy"] == 1.0 and elapsed < 15 * 60
    record(9, ok, f"[{kind}] {OVERFIT_EPOCHS} iterations, mask AP50 {rep.mask.ap50:.1f}, "
                  f"accuracy {100 * rep.rates['accuracy']:.0f}%, {elapsed:.0f}s")


# 10 ---------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    split = write_dataset(str(tmp_path / "data"), n_images=4, seed=10, negatives=1)
    cfg = tiny_config(epochs=2)
    ckpts, reports = [], []
    for run in range(2):
        result = train(cfg, split, train_root=str(tmp_path / "data"))
        path = tmp_path / f"run{run}.ckpt"
        save_checkpoint(path, result.last)
        ckpts.append(path.read_bytes())
        reports.append(evaluate(path, split, cfg, image_root=str(tmp_path / "data")).to_json())
    ok = ckpts[0] == ckpts[1] and reports[0] == reports[1]
    record(10, ok, f"checkpoints identical: {ckpts[0] == ckpts[1]} ({len(ckpts[0])} bytes), "
                   f"reports identical: {reports[0] == reports[1]}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
