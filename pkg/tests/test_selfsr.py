import math

import numpy as np
import pytest
import torch

from rehrseg.degrade import make_selfsr_pairs
from rehrseg.phantom import PhantomSpec, generate_phantom
from rehrseg.selfsr import (
    SelfSRCheckpoint, SelfSRConfig, SelfSRNet, UASRHead, backbone_forward, infer_selfsr, train_selfsr,
    uasr_forward,
)
from rehrseg.degrade import degrade_pair


def test_shapes():
    net = SelfSRNet(r=4, channels=6, branches=3, num_classes=2, mid_channels=4)
    img = torch.rand(2, 1, 5, 12, 10)
    lab = torch.randint(0, 2, (2, 5, 12, 10))
    feats, out = net(img, lab)
    assert feats.shape == (2, 6, 5, 12, 10)
    assert out.image.shape == (2, 1, 20, 12, 10)
    assert out.label_logits.shape == (2, 2, 20, 12, 10)
    assert out.branch_images.shape == (2, 3, 20, 12, 10)
    assert out.branch_labels.shape == (2, 3, 2, 20, 12, 10)
    assert out.uncertainty.shape == out.image.shape


def test_head_partition_of_unity_and_convexity():
    head = UASRHead(5, r=3, branches=4, mid_channels=4)
    for _ in range(5):
        out = head(torch.randn(1, 5, 4, 6, 6) * 3)
        torch.testing.assert_close(out.attention.sum(1), torch.ones(1, 12, 6, 6), atol=1e-5, rtol=0)
        lo, hi = out.branch_images.min(1, keepdim=True).values, out.branch_images.max(1, keepdim=True).values
        assert (out.image >= lo - 1e-6).all() and (out.image <= hi + 1e-6).all()
        assert (out.uncertainty > 0).all() and (out.uncertainty < 1).all()
        assert (out.branch_images.abs() < 1).all()


def test_saturated_attention_selects_one_branch():
    head = UASRHead(3, r=2, branches=3, mid_channels=2)
    with torch.no_grad():
        head.attn_conv.weight.zero_()
        head.attn_conv.bias.copy_(torch.tensor([0.0, 80.0, 0.0]))
    out = head(torch.randn(1, 3, 4, 4, 4))
    torch.testing.assert_close(out.image[:, 0], out.branch_images[:, 1])
    torch.testing.assert_close(out.label_logits, out.branch_labels[:, 1])


def test_uncertainty_is_sigmoid_of_attention_conv():
    head = UASRHead(3, r=2, branches=2, mid_channels=2)
    out = head(torch.randn(1, 3, 4, 4, 4))
    expected = torch.sigmoid(head.unc_conv(out.attention))
    torch.testing.assert_close(out.uncertainty, expected)


def test_merge_is_sliding_window_over_slices():
    # the output for HR slices of LR slice k depends only on LR slices k-1..k+1
    head = UASRHead(2, r=2, branches=2, mid_channels=2)
    x = torch.randn(1, 2, 8, 4, 4)
    y = x.clone()
    y[:, :, 7] += 5.0
    with torch.no_grad():
        a, b = head.merge(x), head.merge(y)
    assert torch.equal(a[:, :, :6], b[:, :, :6])
    assert not torch.equal(a[:, :, 6], b[:, :, 6])


def test_uasr_forward_validation():
    head = UASRHead(4, r=2)
    with pytest.raises(ValueError):
        uasr_forward(torch.randn(1, 3, 4, 4, 4), head)
    with pytest.raises(ValueError):
        uasr_forward(torch.full((1, 4, 4, 4, 4), float("nan")), head)


def test_backbone_rejects_shallow_input():
    net = SelfSRNet(r=2, channels=4)
    with pytest.raises(ValueError):
        backbone_forward(net, torch.rand(1, 1, 2, 8, 8), torch.zeros(1, 2, 8, 8, dtype=torch.long))


def test_config_validation():
    with pytest.raises(ValueError):
        SelfSRConfig(r=1)
    with pytest.raises(ValueError):
        SelfSRConfig(iters_total=10, iters_uncertainty_on=10)


@pytest.fixture(scope="module")
def tiny_pairs():
    img, lab = generate_phantom(PhantomSpec(size=32, seed=3, radius_range=(4, 8)))
    return make_selfsr_pairs(img, lab, 4, patch_size=(4, 16, 16), stride=(2, 8, 8))


def tiny_cfg(**kw):
    base = dict(r=4, channels=4, mid_channels=2, iters_total=12, iters_uncertainty_on=8,
                batch_size=2, learning_rate=1e-3, seed=5, patch_size=(4, 16, 16))
    base.update(kw)
    return SelfSRConfig(**base)


def test_training_is_deterministic(tiny_pairs):
    a = train_selfsr(tiny_pairs, tiny_cfg(), log_every=0)
    b = train_selfsr(tiny_pairs, tiny_cfg(), log_every=0)
    assert [r["total"] for r in a.trace] == [r["total"] for r in b.trace]
    assert all(torch.equal(a.state[k], b.state[k]) for k in a.state)


def test_uncertainty_switch_recorded(tiny_pairs):
    ck = train_selfsr(tiny_pairs, tiny_cfg(), log_every=0)
    flags = [r["uncertainty_on"] for r in ck.trace]
    assert flags == [0] * 8 + [1] * 4
    assert all(math.isfinite(r["total"]) for r in ck.trace)


def test_resume_from_same_config_is_bit_exact(tiny_pairs, tmp_path):
    full = train_selfsr(tiny_pairs, tiny_cfg(), log_every=0)
    cfg6 = tiny_cfg()
    part = train_selfsr(tiny_pairs, cfg6, log_every=0, stop_after=6)
    part.save(tmp_path)
    resumed = train_selfsr(tiny_pairs, cfg6, resume=SelfSRCheckpoint.load(tmp_path), log_every=0)
    np.testing.assert_allclose([r["total"] for r in resumed.trace], [r["total"] for r in full.trace], rtol=1e-6)


def test_checkpoint_roundtrip(tiny_pairs, tmp_path):
    ck = train_selfsr(tiny_pairs, tiny_cfg(iters_total=3, iters_uncertainty_on=1), log_every=0)
    ck.save(tmp_path)
    assert {"weights.pt", "manifest.json", "loss_trace.csv"} <= {p.name for p in tmp_path.iterdir()}
    back = SelfSRCheckpoint.load(tmp_path)
    assert back.iteration == 3 and back.config == ck.config
    assert [r["total"] for r in back.trace] == pytest.approx([r["total"] for r in ck.trace])


def test_pair_r_mismatch(tiny_pairs):
    with pytest.raises(ValueError):
        train_selfsr(tiny_pairs, tiny_cfg(r=2), log_every=0)


def test_infer_shapes_and_ranges(tiny_pairs):
    ck = train_selfsr(tiny_pairs, tiny_cfg(iters_total=2, iters_uncertainty_on=1), log_every=0)
    img, lab = generate_phantom(PhantomSpec(size=32, seed=9, radius_range=(4, 8)))
    lr, lr_lab = degrade_pair(img, lab, 4)
    b = infer_selfsr(lr, lr_lab, ck)
    assert b.image.shape == (32, 32, 32) and b.labels.shape == (32, 32, 32)
    assert b.image.spacing == (1.0, 1.0, 1.0)
    assert b.image.data.min() >= 0 and b.image.data.max() <= 1
    assert ((b.uncertainty > 0) & (b.uncertainty < 1)).all()
    assert b.features.shape == (4, 8, 32, 32)
    with pytest.raises(ValueError):
        infer_selfsr(lr, lr_lab, ck, r=2)


def test_linear_upsample_depth_grid():
    from rehrseg.selfsr.model import linear_upsample_depth
    x = torch.tensor([0.0, 4.0, 8.0]).view(1, 1, 3, 1, 1)
    out = linear_upsample_depth(x, 4)[0, 0, :, 0, 0]
    torch.testing.assert_close(out, torch.tensor([0, 1, 2, 3, 4, 5, 6, 7, 8, 8, 8, 8.0]))


def test_residual_head_with_zero_correction_returns_interpolation():
    from rehrseg.selfsr.model import linear_upsample_depth
    head = UASRHead(3, r=2, branches=3, mid_channels=2, residual=True)
    with torch.no_grad():
        head.image_conv.weight.zero_()
        head.image_conv.bias.zero_()
    lr = torch.rand(1, 1, 4, 4, 4)
    out = head(torch.randn(1, 3, 4, 4, 4), lr)
    torch.testing.assert_close(out.image, linear_upsample_depth(lr, 2))
    with pytest.raises(ValueError):
        head(torch.randn(1, 3, 4, 4, 4))


def test_residual_branches_keep_mixture_convex():
    head = UASRHead(3, r=2, branches=4, mid_channels=2, residual=True)
    out = head(torch.randn(1, 3, 4, 6, 6), torch.rand(1, 1, 4, 6, 6))
    lo, hi = out.branch_images.min(1, keepdim=True).values, out.branch_images.max(1, keepdim=True).values
    assert (out.image >= lo - 1e-6).all() and (out.image <= hi + 1e-6).all()


def test_uncertainty_calibration_only_moves_u_conv(tiny_pairs):
    on = train_selfsr(tiny_pairs, tiny_cfg(calibrate_uncertainty=True), log_every=0, stop_after=8)
    off = train_selfsr(tiny_pairs, tiny_cfg(calibrate_uncertainty=False), log_every=0, stop_after=8)
    moved = [k for k in on.state if not torch.equal(on.state[k], off.state[k])]
    assert moved and all(k.startswith("head.unc_conv") for k in moved)
    assert all(row["u_calibration"] == 0.0 for row in off.trace)
    assert [r["l1"] for r in on.trace] == [r["l1"] for r in off.trace]
