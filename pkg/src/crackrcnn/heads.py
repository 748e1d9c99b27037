"""Region proposals, target assignment, RoI heads and the Mask R-CNN losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import List, NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ops import Anchors, BoxCoder, box_iou_matrix, clip_boxes, generate_anchors, nms, roi_align

__all__ = [
    "Proposal",
    "Detection",
    "LossBundle",
    "Assignment",
    "RPNHead",
    "BoxHead",
    "MaskHead",
    "select_proposals",
    "rpn_forward_and_propose",
    "match",
    "match_and_sample",
    "smooth_l1",
    "mask_loss",
    "mask_loss_from_logits",
    "mask_targets",
    "paste_mask",
    "generate_anchors",
    "roi_align",
]

RPN_CODER = BoxCoder((1.0, 1.0, 1.0, 1.0))
HEAD_CODER = BoxCoder((10.0, 10.0, 5.0, 5.0))
MIN_BOX_SIZE = 1e-3


@dataclass(frozen=True)
class Proposal:
    box: tuple
    objectness: float


@dataclass
class Detection:
    box: tuple
    score: float
    mask: np.ndarray  # H x W bool, image coordinates
    raw_mask: np.ndarray  # m x m probabilities, RoI coordinates
    label: str = "crack"


@dataclass
class LossBundle:
    rpn_objectness: torch.Tensor
    rpn_box: torch.Tensor
    head_class: torch.Tensor
    head_box: torch.Tensor
    mask: torch.Tensor

    def total(self, weights=(1.0, 1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
        return sum(w * getattr(self, f.name) for w, f in zip(weights, fields(self)))

    def as_floats(self) -> dict:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    """Element-wise ``0.5 x**2`` inside ``|x| < 1``, ``|x| - 0.5`` outside."""
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def _check_binary(target: torch.Tensor):
    if not bool(((target == 0) | (target == 1)).all()):
        raise ValueError("mask target must be binary")


def mask_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy of probabilities against a binary grid."""
    target = torch.as_tensor(target, dtype=pred.dtype)
    _check_binary(target)
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def mask_loss_from_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    target = torch.as_tensor(target, dtype=logits.dtype)
    _check_binary(target)
    return F.binary_cross_entropy_with_logits(logits, target)


class Assignment(NamedTuple):
    labels: np.ndarray  # 1 positive, 0 negative, -1 ignored
    matched: np.ndarray  # gt index per proposal, -1 when there is no gt
    max_iou: np.ndarray


def match(boxes, gt_boxes, pos_iou: float, neg_iou: float, allow_low_quality: bool = False) -> Assignment:
    """Label proposals by their best IoU with any ground truth.

    With ``allow_low_quality`` every gt also claims the proposals that reach
    its own highest IoU, the usual RPN rule that keeps tiny objects covered.
    """
    if not 0 <= neg_iou <= pos_iou <= 1:
        raise ValueError(f"need 0 <= neg_iou <= pos_iou <= 1, got {neg_iou}, {pos_iou}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    if len(gt_boxes) == 0:
        return Assignment(np.zeros(n, np.int64), np.full(n, -1, np.int64), np.zeros(n))
    iou = box_iou_matrix(boxes, gt_boxes)
    matched = iou.argmax(axis=1)
    best = iou[np.arange(n), matched]
    labels = np.full(n, -1, dtype=np.int64)
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    if allow_low_quality:
        per_gt = iou.max(axis=0)
        for g in range(len(gt_boxes)):
            if per_gt[g] <= 0:
                continue
            hits = np.flatnonzero(iou[:, g] == per_gt[g])
            labels[hits] = 1
            matched[hits] = g
    return Assignment(labels, matched.astype(np.int64), best)


def _sample(labels, batch, pos_fraction, rng):
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(batch * pos_fraction))
    n_neg = min(len(neg), batch - n_pos)
    pos = rng.permutation(pos)[:n_pos]
    neg = rng.permutation(neg)[:n_neg]
    return np.sort(pos), np.sort(neg)


def match_and_sample(proposals, gt_boxes, pos_iou=0.5, neg_iou=0.5, batch=64, pos_fraction=0.25, rng=None):
    """Assign and subsample RoIs for the box/mask heads.

    Returns ``(indices, labels, matched_gt)`` over the sampled RoIs, positives
    first. ``matched_gt`` is -1 for negatives.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    a = match(proposals, gt_boxes, pos_iou, neg_iou)
    pos, neg = _sample(a.labels, batch, pos_fraction, rng)
    idx = np.concatenate([pos, neg]).astype(np.int64)
    labels = np.concatenate([np.ones(len(pos), np.int64), np.zeros(len(neg), np.int64)])
    matched = np.where(labels == 1, a.matched[idx], -1) if len(idx) else np.zeros(0, np.int64)
    return idx, labels, matched


class RPNHead(nn.Module):
    def __init__(self, channels, num_anchors):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, num_anchors * 4, 1)
        self.num_anchors = num_anchors
        for m in (self.conv, self.objectness, self.deltas):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    def forward(self, levels):
        """Flattened ``(N, A_total)`` logits and ``(N, A_total, 4)`` deltas."""
        logits, deltas = [], []
        a = self.num_anchors
        for x in levels:
            t = F.relu(self.conv(x))
            n, _, h, w = t.shape
            logits.append(self.objectness(t).permute(0, 2, 3, 1).reshape(n, -1))
            d = self.deltas(t).reshape(n, a, 4, h, w).permute(0, 3, 4, 1, 2)
            deltas.append(d.reshape(n, -1, 4))
        return torch.cat(logits, dim=1), torch.cat(deltas, dim=1)


def select_proposals(anchors, logits, deltas, image_size, pre_nms_top_n, post_nms_top_n, nms_iou):
    """Decode one image's RPN outputs into at most ``post_nms_top_n`` boxes.

    Returns detached ``(boxes, objectness)`` sorted by descending objectness.
    """
    h, w = image_size
    logits = logits.detach()
    deltas = deltas.detach()
    anchors = torch.as_tensor(anchors, dtype=deltas.dtype)
    k = min(pre_nms_top_n, len(logits))
    scores = torch.sigmoid(logits)
    # stable order on ties so proposals never depend on sort internals
    order = np.lexsort((np.arange(len(logits)), -scores.numpy()))[:k]
    order = torch.as_tensor(order)
    boxes = clip_boxes(RPN_CODER.decode(anchors[order], deltas[order]), h, w)
    scores = scores[order]
    ok = ((boxes[:, 2] - boxes[:, 0]) > MIN_BOX_SIZE) & ((boxes[:, 3] - boxes[:, 1]) > MIN_BOX_SIZE)
    boxes, scores = boxes[ok], scores[ok]
    keep = nms(boxes.numpy(), scores.numpy(), nms_iou)[:post_nms_top_n]
    keep = torch.as_tensor(keep, dtype=torch.long)
    return boxes[keep], scores[keep]


def rpn_forward_and_propose(pyramid, rpn: RPNHead, anchors: Anchors, image_size, pre_nms_top_n=300,
                            post_nms_top_n=50, nms_iou=0.7) -> List[List[Proposal]]:
    logits, deltas = rpn(pyramid.levels)
    out = []
    for i in range(len(logits)):
        boxes, scores = select_proposals(
            anchors.boxes, logits[i], deltas[i], image_size, pre_nms_top_n, post_nms_top_n, nms_iou
        )
        out.append([Proposal(tuple(float(v) for v in b), float(s)) for b, s in zip(boxes, scores)])
    return out


class BoxHead(nn.Module):
    """Two shared fully connected layers, crack/background logits and box deltas."""

    def __init__(self, channels, pool, hidden):
        super().__init__()
        self.fc1 = nn.Linear(channels * pool * pool, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, 2)
        self.box = nn.Linear(hidden, 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.normal_(self.box.weight, std=0.001)
        nn.init.zeros_(self.cls.bias)
        nn.init.zeros_(self.box.bias)

    def forward(self, pooled):
        x = F.relu(self.fc1(pooled.flatten(1)))
        x = F.relu(self.fc2(x))
        return self.cls(x), self.box(x)


class MaskHead(nn.Module):
    """Class-agnostic FCN: ``pool x pool`` RoI features to ``2*pool`` mask logits."""

    def __init__(self, channels, num_convs=2):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(num_convs))
        self.up = nn.ConvTranspose2d(channels, channels, 2, stride=2)
        self.logits = nn.Conv2d(channels, 1, 1)

    def forward(self, pooled):
        x = pooled
        for c in self.convs:
            x = F.relu(c(x))
        x = F.relu(self.up(x))
        return self.logits(x)[:, 0]


def mask_targets(gt_masks: torch.Tensor, rois: torch.Tensor, size: int) -> torch.Tensor:
    """Crop each RoI's matched gt mask and resample it to a binary ``size x size`` grid."""
    out = []
    for m, roi in zip(gt_masks, rois):
        grid = roi_align(m[None].to(rois.dtype), roi[None], size, 1.0, 2)[0, 0]
        out.append((grid >= 0.5).to(rois.dtype))
    if not out:
        return rois.new_zeros((0, size, size))
    return torch.stack(out)


def paste_mask(raw: np.ndarray, box, height: int, width: int, threshold: float) -> np.ndarray:
    """Resample an RoI probability grid into the image and binarise it.

    Only pixels whose centres fall inside ``box`` can be set; each takes the
    bilinear value of ``raw`` at its position inside the RoI.
    """
    raw = np.asarray(raw, dtype=np.float64)
    m = raw.shape[0]
    x1, y1, x2, y2 = (float(v) for v in box)
    out = np.zeros((height, width), dtype=bool)
    c0, c1 = max(int(math.ceil(x1 - 0.5)), 0), min(int(math.floor(x2 - 0.5)), width - 1)
    r0, r1 = max(int(math.ceil(y1 - 0.5)), 0), min(int(math.floor(y2 - 0.5)), height - 1)
    if c1 < c0 or r1 < r0 or x2 <= x1 or y2 <= y1:
        return out
    u = ((np.arange(c0, c1 + 1) + 0.5 - x1) / (x2 - x1) * m - 0.5).clip(0, m - 1)
    v = ((np.arange(r0, r1 + 1) + 0.5 - y1) / (y2 - y1) * m - 0.5).clip(0, m - 1)
    u0 = np.minimum(np.floor(u).astype(int), max(m - 2, 0))
    v0 = np.minimum(np.floor(v).astype(int), max(m - 2, 0))
    u1, v1 = np.minimum(u0 + 1, m - 1), np.minimum(v0 + 1, m - 1)
    fu, fv = (u - u0)[None, :], (v - v0)[:, None]
    vals = (
        raw[v0][:, u0] * (1 - fv) * (1 - fu)
        + raw[v0][:, u1] * (1 - fv) * fu
        + raw[v1][:, u0] * fv * (1 - fu)
        + raw[v1][:, u1] * fv * fu
    )
    out[r0 : r1 + 1, c0 : c1 + 1] = vals >= threshold
    return out
