"""Geometric primitives shared by the necks and heads.

Everything here works in continuous pixel coordinates with boxes as
``(x1, y1, x2, y2)``; feature cell ``(i, j)`` of a map with stride ``s``
covers ``[j*s, (j+1)*s) x [i*s, (i+1)*s)`` and is centred at ``(j+0.5)*s``.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
import torch

__all__ = [
    "Anchors",
    "generate_anchors",
    "BoxCoder",
    "box_iou_matrix",
    "nms",
    "roi_align",
    "clip_boxes",
]

BBOX_CLAMP = math.log(1000.0 / 16)


class Anchors(NamedTuple):
    boxes: np.ndarray  # A x 4
    levels: np.ndarray  # A, pyramid level index per anchor


def generate_anchors(level_shapes, strides, scales, ratios) -> Anchors:
    """Anchors at every feature cell centre of every level.

    ``scales`` are side lengths in input pixels (an anchor of scale ``s``
    has area ``s**2`` for every ratio). Pass a flat list to use the same
    scales on every level, or one list per level. ``ratio`` is width over
    height. Order is level, row, column, scale, ratio, which matches the
    channel layout of the RPN outputs.
    """
    if not len(scales) or not len(ratios):
        raise ValueError("scales and ratios must be nonempty")
    per_level = scales if isinstance(scales[0], (list, tuple)) else [scales] * len(level_shapes)
    if len(per_level) != len(level_shapes):
        raise ValueError("need one scale list per level")
    boxes, levels = [], []
    for lvl, ((h, w), stride, lvl_scales) in enumerate(zip(level_shapes, strides, per_level)):
        shapes = []
        for s in lvl_scales:
            for r in ratios:
                shapes.append((s * math.sqrt(r), s / math.sqrt(r)))
        wh = np.asarray(shapes, dtype=np.float64)  # K x 2
        cy, cx = np.meshgrid(
            (np.arange(h, dtype=np.float64) + 0.5) * stride,
            (np.arange(w, dtype=np.float64) + 0.5) * stride,
            indexing="ij",
        )
        ctr = np.stack([cx.ravel(), cy.ravel()], axis=1)[:, None, :]  # HW x 1 x 2
        half = wh[None] / 2.0
        lvl_boxes = np.concatenate([ctr - half, ctr + half], axis=2).reshape(-1, 4)
        boxes.append(lvl_boxes)
        levels.append(np.full(len(lvl_boxes), lvl, dtype=np.int64))
    return Anchors(np.concatenate(boxes), np.concatenate(levels))


class BoxCoder:
    """Standard R-CNN delta parameterisation.

    ``dx = wx * (gx - ax) / aw``, ``dw = ww * log(gw / aw)`` and likewise for
    y/h. Decoding clamps the log-size deltas to keep ``exp`` finite.
    """

    def __init__(self, weights=(1.0, 1.0, 1.0, 1.0)):
        self.weights = tuple(float(w) for w in weights)

    def encode(self, anchors: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        wx, wy, ww, wh = self.weights
        aw = anchors[:, 2] - anchors[:, 0]
        ah = anchors[:, 3] - anchors[:, 1]
        ax = anchors[:, 0] + 0.5 * aw
        ay = anchors[:, 1] + 0.5 * ah
        gw = targets[:, 2] - targets[:, 0]
        gh = targets[:, 3] - targets[:, 1]
        gx = targets[:, 0] + 0.5 * gw
        gy = targets[:, 1] + 0.5 * gh
        return torch.stack(
            [wx * (gx - ax) / aw, wy * (gy - ay) / ah, ww * torch.log(gw / aw), wh * torch.log(gh / ah)],
            dim=1,
        )

    def decode(self, anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
        wx, wy, ww, wh = self.weights
        aw = anchors[:, 2] - anchors[:, 0]
        ah = anchors[:, 3] - anchors[:, 1]
        ax = anchors[:, 0] + 0.5 * aw
        ay = anchors[:, 1] + 0.5 * ah
        dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
        dw = torch.clamp(deltas[:, 2] / ww, max=BBOX_CLAMP)
        dh = torch.clamp(deltas[:, 3] / wh, max=BBOX_CLAMP)
        cx, cy = ax + dx * aw, ay + dy * ah
        w, h = aw * torch.exp(dw), ah * torch.exp(dh)
        return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def box_iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``a`` (N x 4) and ``b`` (M x 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns kept indices in visiting order: descending score, ties broken
    by ``(x1, y1, x2, y2)`` ascending, then by original index. A box is
    suppressed when its IoU with a kept box exceeds ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(boxes)), boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))
    iou = box_iou_matrix(boxes[order], boxes[order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        keep.append(order[pos])
        alive &= ~(iou[pos] > iou_threshold)
        alive[pos] = False
    return np.asarray(keep, dtype=np.int64)


def _sample_axis(lo, hi, k, n, size, dtype):
    # lo, hi: R; returns R x (k*n) sample index coordinates, clamped to the map
    steps = (torch.arange(k * n, dtype=dtype) // n) + ((torch.arange(k * n, dtype=dtype) % n) + 0.5) / n
    coords = lo[:, None] + steps[None, :] * ((hi - lo) / k)[:, None]
    coords = (coords - 0.5).clamp(0, size - 1)
    base = coords.floor().clamp(max=max(size - 2, 0))
    frac = coords - base
    i0 = base.long()
    i1 = (i0 + 1).clamp(max=size - 1)
    return i0, i1, frac


def roi_align(feature: torch.Tensor, rois, output_size: int, spatial_scale: float = 1.0, samples_per_bin: int = 2):
    """Quantisation-free RoI pooling.

    ``feature`` is ``C x H x W`` and ``rois`` is ``R x 4`` in input pixels;
    ``spatial_scale`` maps input pixels to feature cells (``1 / stride``).
    Each of the ``output_size**2`` bins averages ``samples_per_bin**2``
    bilinear samples on a regular grid inside the bin. Samples falling
    outside the map take the nearest border value. Returns
    ``R x C x output_size x output_size``.
    """
    rois = torch.as_tensor(rois, dtype=feature.dtype).reshape(-1, 4)
    c, h, w = feature.shape
    k, n = int(output_size), int(samples_per_bin)
    if len(rois) == 0:
        return feature.new_zeros((0, c, k, k))
    if bool(((rois[:, 2] <= rois[:, 0]) | (rois[:, 3] <= rois[:, 1])).any()):
        raise ValueError("roi_align: degenerate RoI with non-positive width or height")
    r = rois * spatial_scale
    y0, y1, fy = _sample_axis(r[:, 1], r[:, 3], k, n, h, feature.dtype)
    x0, x1, fx = _sample_axis(r[:, 0], r[:, 2], k, n, w, feature.dtype)
    # gather: C x R x (kn) x (kn)
    def at(yi, xi):
        return feature[:, yi[:, :, None], xi[:, None, :]]

    wy1 = fy[:, :, None]
    wx1 = fx[:, None, :]
    val = (
        at(y0, x0) * (1 - wy1) * (1 - wx1)
        + at(y0, x1) * (1 - wy1) * wx1
        + at(y1, x0) * wy1 * (1 - wx1)
        + at(y1, x1) * wy1 * wx1
    )
    val = val.reshape(c, len(rois), k, n, k, n).mean(dim=(3, 5))
    return val.permute(1, 0, 2, 3).contiguous()
