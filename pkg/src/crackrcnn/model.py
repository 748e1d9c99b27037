"""Mask R-CNN assembled from a backbone, an RPN and the RoI heads."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbones import BackboneConfig, FeaturePyramid, adaptive_feature_pooling, build_backbone
from .heads import (
    HEAD_CODER,
    MIN_BOX_SIZE,
    RPN_CODER,
    BoxHead,
    Detection,
    LossBundle,
    MaskHead,
    RPNHead,
    _sample,
    mask_loss_from_logits,
    mask_targets,
    match,
    match_and_sample,
    paste_mask,
    select_proposals,
    smooth_l1,
)
from .ops import clip_boxes, generate_anchors, nms, roi_align

__all__ = ["HeadConfig", "MaskRCNN"]


@dataclass
class HeadConfig:
    anchor_sizes: tuple = (16.0, 32.0, 64.0, 128.0)  # one per pyramid level
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_pre_nms_train: int = 600
    rpn_post_nms_train: int = 100
    rpn_pre_nms_test: int = 300
    rpn_post_nms_test: int = 50
    rpn_nms_iou: float = 0.7
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 128
    rpn_pos_fraction: float = 0.5
    roi_pos_iou: float = 0.5
    roi_neg_iou: float = 0.5
    roi_batch: int = 64
    roi_pos_fraction: float = 0.25
    box_pool: int = 7
    mask_pool: int = 14
    samples_per_bin: int = 2
    hidden: int = 64
    mask_convs: int = 2
    roi_pooling: str = "auto"  # auto | adaptive | level
    canonical_size: float = 56.0
    canonical_level: int = 2
    nms_iou: float = 0.5
    max_detections: int = 20
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.roi_pooling not in ("auto", "adaptive", "level"):
            raise ValueError(f"roi_pooling must be auto, adaptive or level, got {self.roi_pooling!r}")
        if len(self.loss_weights) != 5:
            raise ValueError("loss_weights needs five entries")

    @property
    def mask_size(self) -> int:
        return 2 * self.mask_pool


class MaskRCNN(nn.Module):
    def __init__(self, backbone: BackboneConfig, heads: Optional[HeadConfig] = None):
        super().__init__()
        self.backbone_cfg = backbone
        self.cfg = heads or HeadConfig()
        self.backbone = build_backbone(backbone)
        c = backbone.out_channels
        self.rpn = RPNHead(c, len(self.cfg.anchor_ratios))
        self.box_head = BoxHead(c, self.cfg.box_pool, self.cfg.hidden)
        self.mask_head = MaskHead(c, self.cfg.mask_convs)
        mode = self.cfg.roi_pooling
        self.adaptive = mode == "adaptive" or (mode == "auto" and backbone.kind == "a_panet")
        self._anchor_cache = {}

    # -- shared pieces -------------------------------------------------

    def anchors(self, pyramid: FeaturePyramid) -> torch.Tensor:
        shapes = tuple(tuple(lvl.shape[-2:]) for lvl in pyramid.levels)
        key = (shapes, pyramid.levels[0].dtype)
        if key not in self._anchor_cache:
            sizes = [[s] for s in self.cfg.anchor_sizes]
            a = generate_anchors(shapes, pyramid.strides, sizes, self.cfg.anchor_ratios)
            self._anchor_cache[key] = torch.as_tensor(a.boxes, dtype=pyramid.levels[0].dtype)
        return self._anchor_cache[key]

    def pool(self, pyramid: FeaturePyramid, i: int, rois: torch.Tensor, size: int) -> torch.Tensor:
        spb = self.cfg.samples_per_bin
        if self.adaptive:
            return adaptive_feature_pooling(pyramid, rois, size, spb, batch_index=i)
        n_lvl = len(pyramid.levels)
        wh = ((rois[:, 2] - rois[:, 0]) * (rois[:, 3] - rois[:, 1])).detach().clamp(min=1e-12).sqrt()
        lvl = torch.floor(self.cfg.canonical_level + torch.log2(wh / self.cfg.canonical_size))
        lvl = lvl.clamp(0, n_lvl - 1).long()
        parts, order = [], []
        for l, (feat, stride) in enumerate(zip(pyramid.levels, pyramid.strides)):
            idx = torch.nonzero(lvl == l).flatten()
            if len(idx):
                parts.append(roi_align(feat[i], rois[idx], size, 1.0 / stride, spb))
                order.append(idx)
        if not parts:
            return rois.new_zeros((0, pyramid.channels, size, size))
        pooled = torch.cat(parts)
        inverse = torch.argsort(torch.cat(order))
        return pooled[inverse]

    # -- training ------------------------------------------------------

    def losses(self, images: torch.Tensor, targets: List[dict], seed: int = 0, proposals=None) -> LossBundle:
        """Five Mask R-CNN loss terms for one batch.

        ``targets[i]`` holds ``boxes`` (G x 4) and ``masks`` (G x H x W).
        Passing ``proposals`` (one R x 4 tensor per image) bypasses the RPN's
        own proposals, which makes the loss a smooth function of the
        parameters for gradient checking.
        """
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        pyr = self.backbone(images)
        logits, deltas = self.rpn(pyr.levels)
        anchors = self.anchors(pyr)
        h, w = images.shape[-2:]
        dtype = images.dtype

        obj_terms, rpn_box_terms = [], []
        cls_logits, cls_labels, box_resid, mask_logits, mask_tgts = [], [], [], [], []
        n_roi = 0
        for i, tgt in enumerate(targets):
            gt = torch.as_tensor(tgt["boxes"], dtype=dtype).reshape(-1, 4)
            gt_masks = torch.as_tensor(tgt["masks"]).reshape(-1, h, w)
            a = match(anchors.numpy(), gt.numpy(), cfg.rpn_pos_iou, cfg.rpn_neg_iou, allow_low_quality=True)
            pos, neg = _sample(a.labels, cfg.rpn_batch, cfg.rpn_pos_fraction, rng)
            idx = torch.as_tensor(np.concatenate([pos, neg]), dtype=torch.long)
            lab = torch.cat([torch.ones(len(pos), dtype=dtype), torch.zeros(len(neg), dtype=dtype)])
            obj_terms.append(F.binary_cross_entropy_with_logits(logits[i][idx], lab))
            if len(pos):
                pos_t = torch.as_tensor(pos, dtype=torch.long)
                target_d = RPN_CODER.encode(anchors[pos_t], gt[torch.as_tensor(a.matched[pos])])
                rpn_box_terms.append(smooth_l1(deltas[i][pos_t] - target_d).sum() / max(len(idx), 1))
            else:
                rpn_box_terms.append(deltas.new_zeros(()))

            if proposals is None:
                props, _ = select_proposals(
                    anchors, logits[i], deltas[i], (h, w),
                    cfg.rpn_pre_nms_train, cfg.rpn_post_nms_train, cfg.rpn_nms_iou,
                )
                props = torch.cat([props, gt])
            else:
                props = torch.as_tensor(proposals[i], dtype=dtype).reshape(-1, 4)
            ridx, rlab, rmatch = match_and_sample(
                props.numpy(), gt.numpy(), cfg.roi_pos_iou, cfg.roi_neg_iou,
                cfg.roi_batch, cfg.roi_pos_fraction, rng,
            )
            if len(ridx) == 0:
                continue
            rois = props[torch.as_tensor(ridx)]
            cl, bd = self.box_head(self.pool(pyr, i, rois, cfg.box_pool))
            cls_logits.append(cl)
            cls_labels.append(torch.as_tensor(rlab))
            n_roi += len(ridx)
            n_pos = int((rlab == 1).sum())
            if n_pos:
                prois = rois[:n_pos]
                mgt = torch.as_tensor(rmatch[:n_pos])
                box_resid.append(bd[:n_pos] - HEAD_CODER.encode(prois, gt[mgt]))
                mask_logits.append(self.mask_head(self.pool(pyr, i, prois, cfg.mask_pool)))
                mask_tgts.append(mask_targets(gt_masks[mgt], prois, cfg.mask_size))

        zero = logits.new_zeros(())
        head_class = F.cross_entropy(torch.cat(cls_logits), torch.cat(cls_labels)) if cls_logits else zero
        head_box = smooth_l1(torch.cat(box_resid)).sum() / max(n_roi, 1) if box_resid else zero
        mask = mask_loss_from_logits(torch.cat(mask_logits), torch.cat(mask_tgts)) if mask_logits else zero
        return LossBundle(
            rpn_objectness=torch.stack(obj_terms).mean(),
            rpn_box=torch.stack(rpn_box_terms).mean(),
            head_class=head_class,
            head_box=head_box,
            mask=mask,
        )

    # -- inference -----------------------------------------------------

    @torch.no_grad()
    def predict(self, images: torch.Tensor, score_threshold=0.5, mask_threshold=0.5,
                nms_iou=None, max_detections=None, out_sizes=None, scales=None) -> List[List[Detection]]:
        """Detections per image.

        A detection survives when its crack probability is at least
        ``score_threshold``; a threshold of 1.0 keeps nothing. Masks are
        binarised at ``mask_threshold`` after pasting.

        ``scales[i]`` is the resize factor applied to image ``i`` before it
        was padded into the batch and ``out_sizes[i]`` its original
        ``(height, width)``; boxes and masks are reported in that frame.
        """
        cfg = self.cfg
        nms_iou = cfg.nms_iou if nms_iou is None else nms_iou
        max_detections = cfg.max_detections if max_detections is None else max_detections
        pyr = self.backbone(images)
        logits, deltas = self.rpn(pyr.levels)
        anchors = self.anchors(pyr)
        h, w = images.shape[-2:]
        results = []
        for i in range(len(images)):
            props, _ = select_proposals(
                anchors, logits[i], deltas[i], (h, w),
                cfg.rpn_pre_nms_test, cfg.rpn_post_nms_test, cfg.rpn_nms_iou,
            )
            if len(props) == 0 or score_threshold >= 1.0:
                results.append([])
                continue
            cl, bd = self.box_head(self.pool(pyr, i, props, cfg.box_pool))
            scores = torch.softmax(cl, dim=1)[:, 1]
            boxes = clip_boxes(HEAD_CODER.decode(props, bd), h, w)
            ok = (scores >= score_threshold) & ((boxes[:, 2] - boxes[:, 0]) > MIN_BOX_SIZE) & (
                (boxes[:, 3] - boxes[:, 1]) > MIN_BOX_SIZE
            )
            boxes, scores = boxes[ok], scores[ok]
            keep = nms(boxes.numpy(), scores.numpy(), nms_iou)[:max_detections]
            if len(keep) == 0:
                results.append([])
                continue
            keep = torch.as_tensor(keep)
            boxes, scores = boxes[keep], scores[keep]
            # one RoI at a time so a raw mask never depends on which other boxes survived
            raw = np.stack([
                torch.sigmoid(self.mask_head(self.pool(pyr, i, boxes[k : k + 1], cfg.mask_pool)))[0].numpy()
                for k in range(len(boxes))
            ])
            oh, ow = (h, w) if out_sizes is None else out_sizes[i]
            scale = 1.0 if scales is None else float(scales[i])
            out_boxes = clip_boxes(boxes / scale, oh, ow).numpy()
            dets = []
            for b, s, r in zip(out_boxes, scores.numpy(), raw):
                box = tuple(float(v) for v in b)
                dets.append(Detection(box, float(s), paste_mask(r, box, oh, ow, mask_threshold), r))
            results.append(dets)
        return results
