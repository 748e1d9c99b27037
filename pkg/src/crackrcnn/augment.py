"""Spatial augmentation applied jointly to an image, its masks and its boxes.

Only lossless transforms (flips, quarter turns) and integer crops are
offered, so every box stays the tight bbox of its mask.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

__all__ = ["Sample", "AugmentOp", "AugmentPolicy", "tight_bbox", "apply", "parse_ops", "format_ops"]

OP_KINDS = ("hflip", "vflip", "rotate90", "random_crop")


def tight_bbox(mask: np.ndarray) -> tuple:
    """Half-open pixel extent ``(x1, y1, x2, y2)`` of the set pixels."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise ValueError("tight_bbox of an empty mask")
    cols = np.flatnonzero(mask.any(axis=0))
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3
    masks: np.ndarray  # N x H x W, bool
    boxes: np.ndarray  # N x 4, float64
    scene_level: str = "unknown"
    empty: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool).reshape(-1, *self.image.shape[:2])
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.masks) != len(self.boxes):
            raise ValueError(f"{len(self.masks)} masks but {len(self.boxes)} boxes")

    @classmethod
    def from_masks(cls, image, masks, scene_level="unknown", **kw):
        masks = np.asarray(masks, dtype=bool).reshape(-1, *image.shape[:2])
        boxes = np.array([tight_bbox(m) for m in masks], dtype=np.float64).reshape(-1, 4)
        return cls(image=image, masks=masks, boxes=boxes, scene_level=scene_level, **kw)


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    p: float
    min_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}; choose from {OP_KINDS}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"{self.kind}: probability {self.p} outside [0, 1]")
        if not 0.0 < self.min_fraction <= 1.0:
            raise ValueError(f"{self.kind}: min_fraction {self.min_fraction} outside (0, 1]")


@dataclass(frozen=True)
class AugmentPolicy:
    ops: tuple = ()
    seed: int = 0

    def rng(self, *key: int) -> np.random.Generator:
        """Independent stream per (epoch, sample index, ...) key."""
        return np.random.default_rng([self.seed, *key])


def parse_ops(text: str) -> tuple:
    """``"hflip:0.5, random_crop:0.3:0.6"`` -> tuple of AugmentOp."""
    ops = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        kind, p = parts[0].strip(), float(parts[1]) if len(parts) > 1 else 1.0
        if kind == "random_crop":
            frac = float(parts[2]) if len(parts) > 2 else 0.5
            ops.append(AugmentOp(kind, p, frac))
        else:
            ops.append(AugmentOp(kind, p))
    return tuple(ops)


def format_ops(ops) -> str:
    out = []
    for op in ops:
        if op.kind == "random_crop":
            out.append(f"{op.kind}:{op.p:g}:{op.min_fraction:g}")
        else:
            out.append(f"{op.kind}:{op.p:g}")
    return ", ".join(out)


def _hflip(s: Sample) -> Sample:
    w = s.image.shape[1]
    boxes = s.boxes.copy()
    boxes[:, 0], boxes[:, 2] = w - s.boxes[:, 2], w - s.boxes[:, 0]
    return replace(s, image=s.image[:, ::-1].copy(), masks=s.masks[:, :, ::-1].copy(), boxes=boxes)


def _vflip(s: Sample) -> Sample:
    h = s.image.shape[0]
    boxes = s.boxes.copy()
    boxes[:, 1], boxes[:, 3] = h - s.boxes[:, 3], h - s.boxes[:, 1]
    return replace(s, image=s.image[::-1].copy(), masks=s.masks[:, ::-1].copy(), boxes=boxes)


def _rotate90(s: Sample) -> Sample:
    # counter-clockwise quarter turn: (x, y) -> (y, W - x)
    w = s.image.shape[1]
    b = s.boxes
    boxes = np.stack([b[:, 1], w - b[:, 2], b[:, 3], w - b[:, 0]], axis=1)
    image = np.rot90(s.image, 1, axes=(0, 1)).copy()
    masks = np.rot90(s.masks, 1, axes=(1, 2)).copy()
    return replace(s, image=image, masks=masks, boxes=boxes)


def _crop(s: Sample, min_fraction: float, rng: np.random.Generator) -> Sample:
    h, w = s.image.shape[:2]
    ch = max(1, int(round(h * rng.uniform(min_fraction, 1.0))))
    cw = max(1, int(round(w * rng.uniform(min_fraction, 1.0))))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    image = s.image[y0 : y0 + ch, x0 : x0 + cw].copy()
    masks = s.masks[:, y0 : y0 + ch, x0 : x0 + cw].copy()
    keep = masks.reshape(len(masks), -1).any(axis=1) if len(masks) else np.zeros(0, bool)
    masks = masks[keep]
    boxes = np.array([tight_bbox(m) for m in masks], dtype=np.float64).reshape(-1, 4)
    empty = s.empty or (len(s.masks) > 0 and len(masks) == 0)
    return replace(s, image=image, masks=masks, boxes=boxes, empty=empty)


def apply(policy: AugmentPolicy, sample: Sample, draw: Optional[np.random.Generator] = None) -> Sample:
    """Run every op of ``policy`` in order, each firing with its probability.

    A crop that removes every instance returns a sample with
    ``empty=True``; the caller decides whether to redraw.
    """
    if draw is None:
        draw = policy.rng()
    out = sample
    for op in policy.ops:
        fire = draw.random() < op.p
        if not fire:
            continue
        if op.kind == "hflip":
            out = _hflip(out)
        elif op.kind == "vflip":
            out = _vflip(out)
        elif op.kind == "rotate90":
            out = _rotate90(out)
        else:
            out = _crop(out, op.min_fraction, draw)
    return out
