import numpy as np
import pytest
import torch
from torch import nn

from crackrcnn.backbones import (
    APANet,
    BackboneConfig,
    FeaturePyramid,
    HRFusion,
    HRNet,
    PANetBottomUp,
    ResNetFPN,
    SpatialAttention,
    adaptive_feature_pooling,
    build_backbone,
)
from crackrcnn.ops import roi_align
from oracles import finite_difference_check, roi_align_dense


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def identity_conv_(conv):
    with torch.no_grad():
        conv.weight.zero_()
        k = conv.weight.shape[-1] // 2
        for c in range(conv.weight.shape[0]):
            conv.weight[c, c, k, k] = 1.0
        if conv.bias is not None:
            conv.bias.zero_()


def test_resnet_fpn_shapes():
    torch.manual_seed(0)
    pyr = ResNetFPN(8, 1, 64)(torch.randn(1, 3, 256, 256))
    assert [tuple(l.shape[1:]) for l in pyr.levels] == [(64, 64, 64), (64, 32, 32), (64, 16, 16), (64, 8, 8)]
    assert pyr.strides == [4, 8, 16, 32]


def test_resnet_fpn_zero_params_zero_pyramid():
    pyr = zero_(ResNetFPN(4, 1, 8))(torch.randn(2, 3, 64, 64))
    assert all(bool((l == 0).all()) for l in pyr.levels)


@pytest.mark.parametrize("cls", [ResNetFPN, HRNet, APANet])
def test_indivisible_input_rejected(cls):
    with pytest.raises(ValueError, match="divisible by 32"):
        cls(4, 1, 8)(torch.randn(1, 3, 48, 64))


def test_pyramid_invariants():
    lvl = [torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 4, 4)]
    with pytest.raises(ValueError):
        FeaturePyramid(lvl, [8, 4])
    with pytest.raises(ValueError):
        FeaturePyramid(lvl, [4, 12])
    with pytest.raises(ValueError):
        FeaturePyramid([lvl[0], torch.zeros(1, 5, 4, 4)], [4, 8])


def test_config_attention_requires_apanet():
    with pytest.raises(ValueError):
        BackboneConfig(kind="hrnet", attention_enabled=True)
    with pytest.raises(ValueError):
        BackboneConfig(kind="vgg", attention_enabled=False)


# -- PANet bottom-up -----------------------------------------------------------


def test_bottom_up_identity_isolates_downsampling_path():
    bu = PANetBottomUp(3)
    for conv in list(bu.down) + list(bu.fuse):
        identity_conv_(conv)
    p2 = torch.randn(1, 3, 32, 32, dtype=torch.float32)
    zeros = [torch.zeros(1, 3, 32 // 2**k, 32 // 2**k) for k in (1, 2, 3)]
    out = bu(FeaturePyramid([p2] + zeros, [4, 8, 16, 32]))
    assert torch.equal(out.levels[0], p2)
    assert torch.equal(out.levels[1], p2[..., ::2, ::2])
    assert torch.equal(out.levels[3], p2[..., ::8, ::8])


def test_bottom_up_preserves_shapes_and_checks_channels():
    torch.manual_seed(0)
    pyr = ResNetFPN(4, 1, 8)(torch.randn(1, 3, 64, 64))
    out = PANetBottomUp(8)(pyr)
    assert [l.shape for l in out.levels] == [l.shape for l in pyr.levels]
    with pytest.raises(ValueError, match="channels"):
        PANetBottomUp(6)(pyr)


# -- attention -----------------------------------------------------------------


def test_attention_gate_sums_to_hw():
    torch.manual_seed(0)
    att = SpatialAttention(5).double()
    x = torch.randn(3, 5, 7, 9, dtype=torch.float64) * 10
    g = att.gate(x)
    np.testing.assert_allclose(g.sum(dim=(1, 2, 3)).detach().numpy(), 63.0, atol=1e-5)


def test_attention_constant_input_is_identity():
    torch.manual_seed(1)
    att = SpatialAttention(4).double()
    x = torch.randn(2, 4, 1, 1, dtype=torch.float64).expand(2, 4, 6, 5).contiguous()
    torch.testing.assert_close(att(x), x, rtol=0, atol=1e-6)


def test_attention_disabled_equals_plain_panet():
    torch.manual_seed(2)
    net = APANet(4, 1, 8, attention_enabled=False).double()
    x = torch.randn(1, 3, 64, 64, dtype=torch.float64)
    got = net(x)
    plain = net.bottom_up(net.fpn(x))
    for a, b in zip(got.levels, plain.levels):
        assert a.detach().numpy().tobytes() == b.detach().numpy().tobytes()


def test_attention_projection_gradient():
    torch.manual_seed(3)
    att = SpatialAttention(3).double()
    x = torch.randn(1, 3, 5, 5, dtype=torch.float64)
    err, n = finite_difference_check(lambda: att(x).pow(2).sum(), att.parameters(), fraction=1.0, min_count=4)
    assert n == 4 and err < 1e-4


# -- adaptive pooling ------------------------------------------------------------


def test_adaptive_pooling_single_level_is_roi_align(rng):
    f = torch.tensor(rng.normal(size=(1, 2, 8, 8)))
    rois = torch.tensor([[3.0, 5.0, 20.0, 27.0]], dtype=torch.float64)
    pooled = adaptive_feature_pooling(FeaturePyramid([f], [4]), rois, 3)
    torch.testing.assert_close(pooled, roi_align(f[0], rois, 3, 0.25, 2), rtol=0, atol=0)


def test_adaptive_pooling_max_dominance():
    a = torch.ones(1, 2, 8, 8)
    b = torch.full((1, 2, 4, 4), 0.5)
    pooled = adaptive_feature_pooling(FeaturePyramid([a, b], [4, 8]), torch.tensor([[1.0, 1.0, 30.0, 30.0]]), 4)
    assert bool((pooled == 1.0).all())


def test_adaptive_pooling_matches_oracle_max(rng):
    a = rng.normal(size=(2, 8, 8))
    b = rng.normal(size=(2, 4, 4))
    roi = [2.5, 4.0, 25.0, 19.0]
    pyr = FeaturePyramid([torch.tensor(a)[None], torch.tensor(b)[None]], [4, 8])
    got = adaptive_feature_pooling(pyr, torch.tensor([roi], dtype=torch.float64), 2, samples_per_bin=100)[0]
    expected = np.maximum(roi_align_dense(a, roi, 2, 0.25), roi_align_dense(b, roi, 2, 0.125))
    np.testing.assert_allclose(got.numpy(), expected, atol=1e-9)


def test_adaptive_pooling_rejects_degenerate():
    pyr = FeaturePyramid([torch.zeros(1, 2, 8, 8)], [4])
    with pytest.raises(ValueError):
        adaptive_feature_pooling(pyr, torch.tensor([[4.0, 4.0, 4.0, 9.0]]), 2)


# -- HRNet ---------------------------------------------------------------------


def test_hrnet_branch_shapes():
    torch.manual_seed(0)
    net = HRNet(8, 1, 16)
    xs = net.branches(torch.randn(1, 3, 256, 256))
    assert [tuple(x.shape[1:]) for x in xs] == [(8, 64, 64), (16, 32, 32), (32, 16, 16), (64, 8, 8)]
    pyr = net(torch.randn(1, 3, 256, 256))
    assert pyr.strides == [4, 8, 16, 32] and pyr.channels == 16


def test_fusion_zero_cross_weights_passes_branches_through():
    fusion = HRFusion([2, 4, 8])
    zero_(fusion)
    xs = [torch.rand(1, 2, 16, 16), torch.rand(1, 4, 8, 8), torch.rand(1, 8, 4, 4)]
    for x, y in zip(xs, fusion(xs)):
        assert torch.equal(x, y)  # inputs are non-negative so the relu is inert


def test_fusion_gradient():
    torch.manual_seed(4)
    fusion = HRFusion([2, 4, 8]).double()
    xs = [torch.randn(1, 2, 8, 8, dtype=torch.float64), torch.randn(1, 4, 4, 4, dtype=torch.float64),
          torch.randn(1, 8, 2, 2, dtype=torch.float64)]
    w = [torch.randn_like(x) for x in xs]
    loss = lambda: sum((o * wi).sum() for o, wi in zip(fusion(xs), w))
    err, n = finite_difference_check(loss, fusion.parameters(), fraction=0.05, seed=1)
    assert n >= 20 and err < 1e-4


@pytest.mark.parametrize("kind", ["resnet_fpn", "a_panet", "hrnet"])
def test_forward_deterministic_and_pyramid_valid(kind):
    torch.manual_seed(5)
    net = build_backbone(BackboneConfig(kind=kind, base_channels=4, out_channels=8,
                                        attention_enabled=kind == "a_panet"))
    x = torch.randn(1, 3, 64, 64)
    a, b = net(x), net(x)
    assert a.strides == [4, 8, 16, 32] and a.channels == 8
    for la, lb in zip(a.levels, b.levels):
        assert torch.equal(la, lb)


def test_group_norm_used_not_batch_norm():
    net = build_backbone(BackboneConfig(kind="hrnet", attention_enabled=False))
    assert not any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in net.modules())
