"""IoU, the COCO AP family and image-level recall/precision/accuracy."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .ops import box_iou_matrix

__all__ = [
    "GroundTruth",
    "ApReport",
    "ConfusionCounts",
    "box_iou",
    "mask_iou",
    "coco_ap",
    "image_has_detection",
    "confusion",
    "prf_accuracy",
    "IOU_THRESHOLDS",
    "RECALL_POINTS",
    "AREA_RANGES",
]

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, 1e10),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, 1e10),
}
MAX_DETS = 100


def box_iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for box in (a, b):
        if not (box[2] > box[0] and box[3] > box[1]):
            raise ValueError(f"degenerate box {tuple(box)}")
    return float(box_iou_matrix(a, b)[0, 0])


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        raise ValueError("mask_iou of two empty masks is undefined")
    return np.count_nonzero(a & b) / union


@dataclass
class GroundTruth:
    box: tuple
    mask: Optional[np.ndarray] = None

    def area(self, variant: str) -> float:
        if variant == "mask":
            return float(np.count_nonzero(self.mask))
        x1, y1, x2, y2 = self.box
        return float((x2 - x1) * (y2 - y1))


@dataclass
class ApReport:
    variant: str
    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    ap_s: Optional[float]
    ap_m: Optional[float]
    ap_l: Optional[float]

    def as_dict(self) -> dict:
        return asdict(self)


def _det_area(det, variant):
    if variant == "mask":
        return float(np.count_nonzero(det.mask))
    x1, y1, x2, y2 = det.box
    return float((x2 - x1) * (y2 - y1))


def _iou_table(dets, gts, variant) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    if variant == "box":
        return box_iou_matrix([d.box for d in dets], [g.box for g in gts])
    dm = np.stack([np.asarray(d.mask, bool).ravel() for d in dets]).astype(np.float64)
    gm = np.stack([np.asarray(g.mask, bool).ravel() for g in gts]).astype(np.float64)
    inter = dm @ gm.T
    union = dm.sum(1)[:, None] + gm.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _match_image(iou, gt_ignore, det_area_ignore, thr):
    """Greedy COCO matching of score-sorted detections for one image.

    Returns ``(tp, ignored)`` flags per detection.
    """
    n_det, n_gt = iou.shape
    gt_order = np.argsort(gt_ignore, kind="stable")  # non-ignored first
    gt_taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(n_det, dtype=bool)
    ignored = np.zeros(n_det, dtype=bool)
    for d in range(n_det):
        best = min(thr, 1 - 1e-10)
        m = -1
        for g in gt_order:
            if gt_taken[g]:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if iou[d, g] < best:
                continue
            best = iou[d, g]
            m = g
        if m == -1:
            ignored[d] = det_area_ignore[d]
            continue
        gt_taken[m] = True
        tp[d] = True
        ignored[d] = gt_ignore[m]
    return tp, ignored


def _interpolated_ap(scores, tp, ignored, n_gt) -> float:
    order = np.argsort(-scores, kind="mergesort")
    keep = ~ignored[order]
    tp = tp[order][keep]
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
    # precision envelope: best precision at any recall at least this large
    for i in range(len(precision) - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]
    inds = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = [float(precision[i]) if i < len(precision) else 0.0 for i in inds]
    return math.fsum(q) / len(q)


def coco_ap(detections: Sequence, ground_truth: Sequence, variant: str = "box") -> ApReport:
    """COCO-style AP over aligned per-image lists.

    ``detections[i]`` holds objects with ``box``, ``score`` and (for the mask
    variant) ``mask``; ``ground_truth[i]`` holds :class:`GroundTruth`.
    Values are percentages; a size band without ground truth is ``None``.
    """
    if variant not in ("box", "mask"):
        raise ValueError(f"variant must be 'box' or 'mask', got {variant!r}")
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground truth must cover the same images")
    if sum(len(g) for g in ground_truth) == 0:
        raise ValueError("coco_ap needs at least one ground-truth instance")

    per_image = []
    for dets, gts in zip(detections, ground_truth):
        dets = list(dets)
        order = np.argsort([-d.score for d in dets], kind="mergesort")[:MAX_DETS]
        dets = [dets[i] for i in order]
        per_image.append(
            (
                np.array([d.score for d in dets], dtype=np.float64),
                np.array([_det_area(d, variant) for d in dets]),
                np.array([g.area(variant) for g in gts]),
                _iou_table(dets, gts, variant),
            )
        )

    band_ap = {}
    for band, (lo, hi) in AREA_RANGES.items():
        n_gt = sum(int(((ga >= lo) & (ga <= hi)).sum()) for _, _, ga, _ in per_image)
        if n_gt == 0:
            band_ap[band] = None
            continue
        aps = []
        for thr in IOU_THRESHOLDS:
            scores, tps, igs = [], [], []
            for sc, da, ga, iou in per_image:
                gt_ignore = (ga < lo) | (ga > hi)
                det_ignore = (da < lo) | (da > hi)
                tp, ig = _match_image(iou, gt_ignore, det_ignore, thr)
                scores.append(sc)
                tps.append(tp)
                igs.append(ig)
            aps.append(_interpolated_ap(np.concatenate(scores), np.concatenate(tps), np.concatenate(igs), n_gt))
        band_ap[band] = aps

    def pct(aps, idx=None):
        if aps is None:
            return None
        if idx is not None:
            return 100.0 * aps[idx]
        return 100.0 * math.fsum(aps) / len(aps)

    allb = band_ap["all"]
    return ApReport(
        variant=variant,
        ap=pct(allb),
        ap50=pct(allb, IOU_THRESHOLDS.index(0.5)),
        ap75=pct(allb, IOU_THRESHOLDS.index(0.75)),
        ap_s=pct(band_ap["small"]),
        ap_m=pct(band_ap["medium"]),
        ap_l=pct(band_ap["large"]),
    )


def image_has_detection(detections, score_threshold: float) -> bool:
    """An image is flagged when any detection reaches ``score_threshold``."""
    return any(d.score >= score_threshold for d in detections)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for k in ("tp", "fp", "fn", "tn"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion(predictions: Mapping, image_labels: Mapping, score_threshold: float) -> ConfusionCounts:
    """Image-level tally; both mappings are keyed by image id."""
    if set(predictions) != set(image_labels):
        missing = sorted(set(image_labels) ^ set(predictions), key=str)
        raise ValueError(f"predictions and labels disagree on image ids: {missing}")
    tp = fp = fn = tn = 0
    for image_id, has_crack in image_labels.items():
        flagged = image_has_detection(predictions[image_id], score_threshold)
        if has_crack:
            tp += flagged
            fn += not flagged
        else:
            fp += flagged
            tn += not flagged
    return ConfusionCounts(tp, fp, fn, tn)


def prf_accuracy(c: ConfusionCounts) -> dict:
    """Recall, precision and accuracy; undefined ratios are ``None``."""
    if c.total == 0:
        raise ValueError("no images were evaluated")
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else None
    return {"recall": recall, "precision": precision, "accuracy": (c.tp + c.tn) / c.total}
