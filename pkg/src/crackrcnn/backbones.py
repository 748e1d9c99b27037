"""Backbones and necks that turn an image batch into a feature pyramid.

Three variants share one output contract:

* ``resnet_fpn``: residual body with a top-down FPN.
* ``a_panet``: the same plus a bottom-up augmentation path and an optional
  spatial-softmax gate on every output level.
* ``hrnet``: four-stage multi-resolution network with full cross-branch
  fusion at the end of every stage.

Widths and depths are configurable so the whole family runs on a CPU.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .ops import roi_align

__all__ = [
    "FeaturePyramid",
    "BackboneConfig",
    "ResNetFPN",
    "PANetBottomUp",
    "SpatialAttention",
    "APANet",
    "HRNet",
    "HRFusion",
    "adaptive_feature_pooling",
    "build_backbone",
]

PYRAMID_STRIDES = (4, 8, 16, 32)
BACKBONE_KINDS = ("resnet_fpn", "a_panet", "hrnet")


@dataclass
class FeaturePyramid:
    levels: List[torch.Tensor]  # each N x C x H_l x W_l, finest first
    strides: List[int]

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ValueError("one stride per level required")
        for a, b in zip(self.strides, self.strides[1:]):
            if b <= a:
                raise ValueError(f"strides must increase, got {self.strides}")
        for s in self.strides:
            if s < 1 or s & (s - 1):
                raise ValueError(f"stride {s} is not a power of two")
        chans = {lvl.shape[1] for lvl in self.levels}
        if len(chans) > 1:
            raise ValueError(f"pyramid levels disagree on channel count: {sorted(chans)}")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    def __len__(self):
        return len(self.levels)

    def image(self, i: int) -> "FeaturePyramid":
        """Pyramid of the ``i``-th batch element, batch dim kept."""
        return FeaturePyramid([lvl[i : i + 1] for lvl in self.levels], list(self.strides))


@dataclass
class BackboneConfig:
    kind: str = "a_panet"
    base_channels: int = 8
    depth: int = 1
    out_channels: int = 16
    attention_enabled: bool = True

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"backbone kind {self.kind!r} not in {BACKBONE_KINDS}")
        if self.attention_enabled and self.kind != "a_panet":
            raise ValueError("attention_enabled requires kind = a_panet")
        for name in ("base_channels", "depth", "out_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(4 if c % 4 == 0 else 1, c)


def conv3x3(cin, cout, stride=1, bias=False):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=bias)


def conv1x1(cin, cout, bias=False):
    return nn.Conv2d(cin, cout, 1, bias=bias)


def _check_divisible(x: torch.Tensor, by: int = 32):
    h, w = x.shape[-2:]
    if h % by or w % by:
        raise ValueError(f"input size {h}x{w} must be divisible by {by}")


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.norm1 = _norm(cout)
        self.conv2 = conv3x3(cout, cout)
        self.norm2 = _norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), _norm(cout))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Stem(nn.Module):
    """Two stride-2 convolutions: input pixels to stride-4 cells."""

    def __init__(self, cout):
        super().__init__()
        self.conv1 = conv3x3(3, cout, 2)
        self.norm1 = _norm(cout)
        self.conv2 = conv3x3(cout, cout, 2)
        self.norm2 = _norm(cout)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class ResNetFPN(nn.Module):
    def __init__(self, base_channels=8, depth=1, out_channels=16):
        super().__init__()
        self.stem = Stem(base_channels)
        widths = [base_channels * 2**i for i in range(4)]
        stages = []
        cin = base_channels
        for i, c in enumerate(widths):
            blocks = [BasicBlock(cin, c, 1 if i == 0 else 2)]
            blocks += [BasicBlock(c, c) for _ in range(depth - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.lateral = nn.ModuleList(conv1x1(c, out_channels) for c in widths)
        self.output = nn.ModuleList(conv3x3(out_channels, out_channels) for _ in widths)
        self.out_channels = out_channels

    def forward(self, x) -> FeaturePyramid:
        _check_divisible(x, PYRAMID_STRIDES[-1])
        feats = []
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        inner = self.lateral[-1](feats[-1])
        outs = [self.output[-1](inner)]
        for i in range(len(feats) - 2, -1, -1):
            inner = self.lateral[i](feats[i]) + F.interpolate(inner, scale_factor=2, mode="nearest")
            outs.insert(0, self.output[i](inner))
        return FeaturePyramid(outs, list(PYRAMID_STRIDES))


class PANetBottomUp(nn.Module):
    """``N_2 = P_2``; ``N_{l+1} = fuse(down(N_l) + P_{l+1})``, both 3x3 convs."""

    def __init__(self, channels, num_levels=4):
        super().__init__()
        self.channels = channels
        self.down = nn.ModuleList(conv3x3(channels, channels, 2) for _ in range(num_levels - 1))
        self.fuse = nn.ModuleList(conv3x3(channels, channels) for _ in range(num_levels - 1))

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        for lvl in pyramid.levels:
            if lvl.shape[1] != self.channels:
                raise ValueError(f"level has {lvl.shape[1]} channels, expected {self.channels}")
        outs = [pyramid.levels[0]]
        for i, p in enumerate(pyramid.levels[1:]):
            outs.append(self.fuse[i](self.down[i](outs[-1]) + p))
        return FeaturePyramid(outs, list(pyramid.strides))


class SpatialAttention(nn.Module):
    """Single-channel spatial softmax gate, scaled so its mean is one."""

    def __init__(self, channels):
        super().__init__()
        self.proj = conv1x1(channels, 1, bias=True)

    def gate(self, x):
        n, _, h, w = x.shape
        logits = self.proj(x).reshape(n, h * w)
        return (torch.softmax(logits, dim=1) * (h * w)).reshape(n, 1, h, w)

    def forward(self, x):
        return x * self.gate(x)


class APANet(nn.Module):
    def __init__(self, base_channels=8, depth=1, out_channels=16, attention_enabled=True):
        super().__init__()
        self.fpn = ResNetFPN(base_channels, depth, out_channels)
        self.bottom_up = PANetBottomUp(out_channels, len(PYRAMID_STRIDES))
        self.attention_enabled = attention_enabled
        self.attention = nn.ModuleList(SpatialAttention(out_channels) for _ in PYRAMID_STRIDES)
        self.out_channels = out_channels

    def forward(self, x) -> FeaturePyramid:
        pyr = self.bottom_up(self.fpn(x))
        if not self.attention_enabled:
            return pyr
        gated = [att(lvl) for att, lvl in zip(self.attention, pyr.levels)]
        return FeaturePyramid(gated, pyr.strides)


def adaptive_feature_pooling(pyramid: FeaturePyramid, rois, output_size=7, samples_per_bin=2, batch_index=0):
    """RoIAlign every RoI on every level and fuse the grids by element-wise max."""
    pooled = None
    for lvl, stride in zip(pyramid.levels, pyramid.strides):
        cur = roi_align(lvl[batch_index], rois, output_size, 1.0 / stride, samples_per_bin)
        pooled = cur if pooled is None else torch.maximum(pooled, cur)
    return pooled


class HRFusion(nn.Module):
    """Exchange information between all branch pairs.

    Output branch ``i`` is ``relu(x_i + sum_j T_ij(x_j))`` where ``T_ij`` is a
    1x1 projection plus nearest upsampling for coarser ``j`` and a chain of
    stride-2 3x3 convolutions for finer ``j``.
    """

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        self.widths = list(widths)
        paths = nn.ModuleDict()
        for i, ci in enumerate(widths):
            for j, cj in enumerate(widths):
                if j > i:
                    paths[f"{j}_{i}"] = conv1x1(cj, ci)
                elif j < i:
                    chain = []
                    for step in range(i - j):
                        last = step == i - j - 1
                        chain.append(conv3x3(cj, ci if last else cj, 2))
                        if not last:
                            chain.append(nn.ReLU())
                    paths[f"{j}_{i}"] = nn.Sequential(*chain)
        self.paths = paths

    def forward(self, xs: List[torch.Tensor]) -> List[torch.Tensor]:
        outs = []
        for i in range(len(xs)):
            acc = xs[i]
            for j in range(len(xs)):
                if j == i:
                    continue
                y = self.paths[f"{j}_{i}"](xs[j])
                if j > i:
                    y = F.interpolate(y, scale_factor=2 ** (j - i), mode="nearest")
                acc = acc + y
            outs.append(F.relu(acc))
        return outs


class HRStage(nn.Module):
    def __init__(self, widths, depth):
        super().__init__()
        self.branches = nn.ModuleList(nn.Sequential(*[BasicBlock(c, c) for _ in range(depth)]) for c in widths)
        self.fusion = HRFusion(widths) if len(widths) > 1 else None

    def forward(self, xs):
        xs = [b(x) for b, x in zip(self.branches, xs)]
        return xs if self.fusion is None else self.fusion(xs)


class HRNet(nn.Module):
    """Branch ``b`` (0-based) runs at stride ``4 * 2**b`` with ``base * 2**b`` channels."""

    def __init__(self, base_channels=8, depth=1, out_channels=16):
        super().__init__()
        self.stem = Stem(base_channels)
        self.widths = [base_channels * 2**b for b in range(4)]
        self.stages = nn.ModuleList(HRStage(self.widths[: s + 1], depth) for s in range(4))
        self.transitions = nn.ModuleList(
            nn.Sequential(conv3x3(self.widths[s], self.widths[s + 1], 2), _norm(self.widths[s + 1]), nn.ReLU())
            for s in range(3)
        )
        self.project = nn.ModuleList(conv1x1(c, out_channels) for c in self.widths)
        self.out_channels = out_channels

    def branches(self, x) -> List[torch.Tensor]:
        _check_divisible(x, PYRAMID_STRIDES[-1])
        xs = [self.stem(x)]
        for s, stage in enumerate(self.stages):
            xs = stage(xs)
            if s < 3:
                xs = xs + [self.transitions[s](xs[-1])]
        return xs

    def forward(self, x) -> FeaturePyramid:
        xs = self.branches(x)
        return FeaturePyramid([p(b) for p, b in zip(self.project, xs)], list(PYRAMID_STRIDES))


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.kind == "resnet_fpn":
        return ResNetFPN(cfg.base_channels, cfg.depth, cfg.out_channels)
    if cfg.kind == "a_panet":
        return APANet(cfg.base_channels, cfg.depth, cfg.out_channels, cfg.attention_enabled)
    return HRNet(cfg.base_channels, cfg.depth, cfg.out_channels)
