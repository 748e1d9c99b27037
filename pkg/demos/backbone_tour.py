"""Build each backbone at toy width and print what it hands to the heads.

    python demos/backbone_tour.py
"""
import torch

from crackrcnn.backbones import BackboneConfig, HRNet, SpatialAttention, build_backbone

torch.manual_seed(0)
x = torch.randn(1, 3, 256, 256)

with torch.no_grad():
    for kind in ("resnet_fpn", "a_panet", "hrnet"):
        cfg = BackboneConfig(kind=kind, out_channels=16, attention_enabled=kind == "a_panet")
        net = build_backbone(cfg)
        pyr = net(x)
        n = sum(p.numel() for p in net.parameters())
        shapes = ", ".join("x".join(map(str, l.shape[1:])) for l in pyr.levels)
        print(f"{kind:11s} {n:7d} params  strides {pyr.strides}  levels {shapes}")

    branches = HRNet(8, 1, 16).branches(x)
    print("hrnet stage-4 branches:", [tuple(b.shape[1:]) for b in branches])

    # the gate redistributes weight over positions but keeps its mean at one
    att = SpatialAttention(16)
    feat = torch.randn(1, 16, 32, 32)
    g = att.gate(feat)
    print(f"attention gate: mean {g.mean():.6f}, min {g.min():.3f}, max {g.max():.3f}")
