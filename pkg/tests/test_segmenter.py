import numpy as np
import pytest
import torch
from scipy import ndimage

from rehrseg.degrade import degrade_pair
from rehrseg.phantom import PhantomSpec, generate_phantom
from rehrseg.segmenter import (
    COMPONENTS, SegCheckpoint, SegConfig, SegNet, SegSample, build_seg_dataset, infer_segmenter,
    seg_forward, shift_hr, total_loss, train_segmenter, uncertainty_weight_map,
)
from rehrseg.distill import Adaptor
from rehrseg.selfsr import PseudoHRBundle
from rehrseg.volume_io import LabelVolume, Volume


def test_forward_shapes():
    net = SegNet(2, base_channels=4, levels=3, r=4)
    out = seg_forward(net, torch.rand(2, 1, 6, 16, 16))
    assert out.lr_logits.shape == (2, 2, 6, 16, 16)
    assert out.hr_logits.shape == (2, 2, 24, 16, 16)
    assert out.features.shape == (2, net.feature_channels, 6, 8, 8)


def test_no_hr_head():
    net = SegNet(2, base_channels=4, hr_head=False)
    assert seg_forward(net, torch.rand(1, 1, 4, 8, 8)).hr_logits is None


def test_hr_head_does_not_change_lr_path():
    cfg_on, cfg_off = SegConfig(base_channels=4, hr_head_on=True), SegConfig(base_channels=4, hr_head_on=False)
    a, b = cfg_on.build_model(), cfg_off.build_model()
    x = torch.rand(1, 1, 4, 16, 16)
    assert torch.equal(a(x).lr_logits, b(x).lr_logits)


def test_input_validation():
    net = SegNet(2, base_channels=4)
    with pytest.raises(ValueError):
        seg_forward(net, torch.rand(1, 4, 16, 16))
    with pytest.raises(ValueError):
        seg_forward(net, torch.rand(1, 1, 4, 10, 16))


def test_weight_map_decimates_and_inverts():
    u = torch.zeros(8, 2, 2)
    u[0] = 1.0  # LR slice 0 for offset 0
    w = uncertainty_weight_map(u, 4, 0)
    assert w.shape == (2, 2, 2)
    assert torch.equal(w[0], torch.zeros(2, 2)) and torch.equal(w[1], torch.ones(2, 2))
    # offset 1 sees a flat map -> weight 1 everywhere
    assert torch.equal(uncertainty_weight_map(u, 4, 1), torch.ones(2, 2, 2))


def fake_outputs(b=1, k=2, d=2, h=8, w=8, r=4, c=4):
    from rehrseg.segmenter import SegOutputs
    g = torch.Generator().manual_seed(0)
    return SegOutputs(torch.randn(b, k, d, h, w, generator=g), torch.randn(b, k, r * d, h, w, generator=g),
                      torch.randn(b, c, d, h // 2, w // 2, generator=g))


def loss_inputs():
    out = fake_outputs()
    return dict(outputs=out, lr_labels=torch.randint(0, 2, (1, 2, 8, 8)),
                hr_labels=torch.randint(0, 2, (1, 8, 8, 8)), weights=torch.rand(1, 2, 8, 8),
                teacher=torch.randn(1, 6, 2, 4, 4), adaptor=Adaptor(4, 6))


@pytest.mark.parametrize("flag,comps", [
    ("hr_head_on", ("L_HR_seg",)), ("distill_on", ("L_corr", "L_spatial")),
])
def test_flags_zero_components(flag, comps):
    cfg = SegConfig(**{flag: False})
    _, parts = total_loss(cfg=cfg, **loss_inputs())
    for c in comps:
        assert float(parts[c]) == 0.0
    assert set(parts) == set(COMPONENTS)


def test_lambda_zero_disables_distillation():
    total, parts = total_loss(cfg=SegConfig(lam=0.0), **loss_inputs())
    assert float(parts["L_corr"]) == float(parts["L_spatial"]) == 0.0


def test_uncertainty_flag_off_uses_plain_ce():
    inp = loss_inputs()
    _, on = total_loss(cfg=SegConfig(), **inp)
    _, off = total_loss(cfg=SegConfig(uncertainty_on=False), **inp)
    ce = torch.nn.functional.cross_entropy(inp["outputs"].lr_logits, inp["lr_labels"])
    assert float(off["L_u_seg"]) == pytest.approx(float(ce))
    assert float(on["L_u_seg"]) != pytest.approx(float(ce))


def test_total_is_weighted_sum():
    total, p = total_loss(cfg=SegConfig(lam=0.3), **loss_inputs())
    expected = p["L_u_seg"] + p["L_HR_seg"] + 0.3 * (p["L_corr"] + p["L_spatial"])
    assert total.item() == pytest.approx(expected.item())


def test_missing_inputs_raise():
    inp = loss_inputs()
    inp["teacher"] = None
    with pytest.raises(ValueError):
        total_loss(cfg=SegConfig(), **inp)


def test_shift_hr():
    hr = np.arange(8)[:, None, None]
    np.testing.assert_array_equal(shift_hr(hr, 2)[:, 0, 0], [2, 3, 4, 5, 6, 7, 7, 7])
    assert shift_hr(hr, 0) is hr


def make_case(seed, size=32, r=4):
    img, lab = generate_phantom(PhantomSpec(size=size, seed=seed, radius_range=(4, 8)))
    lr, lr_lab = degrade_pair(img, lab, r)
    rng = np.random.default_rng(seed)
    bundle = PseudoHRBundle(img, lab, rng.random(img.shape).astype(np.float32),
                            rng.standard_normal((4, *lr.shape)).astype(np.float32))
    return lr, lr_lab, bundle


def test_dataset_offsets_and_alignment():
    lr, lr_lab, bundle = make_case(1)
    samples = build_seg_dataset("c", lr, lr_lab, bundle, 4, pseudo=True)
    assert [s.offset for s in samples] == [0, 0, 1, 2, 3]
    assert [s.pseudo for s in samples] == [False, True, True, True, True]
    for s in samples:
        # LR labels of each variant equal its HR target at every r-th slice
        np.testing.assert_array_equal(s.labels[:-1], s.hr_labels[::4][:-1])
    # pseudo samples without a self-SR model have no teacher features
    assert samples[1].features is None


def test_dataset_baseline_only():
    lr, lr_lab, _ = make_case(1)
    s = build_seg_dataset("c", lr, lr_lab, None, 4)
    assert len(s) == 1 and s[0].hr_labels is None


def small_cfg(**kw):
    base = dict(base_channels=4, levels=3, epochs=2, batch_size=2, learning_rate=1e-3, seed=3,
                crop_size=(16, 16), pseudo_data_on=False)
    base.update(kw)
    return SegConfig(**base)


@pytest.fixture(scope="module")
def small_dataset():
    out = []
    for i in range(4):
        lr, lr_lab, bundle = make_case(10 + i)
        out += build_seg_dataset(f"c{i}", lr, lr_lab, bundle, 4, pseudo=False)
    return out


def test_training_deterministic(small_dataset):
    a = train_segmenter(small_dataset, small_cfg(), log_every=0)
    b = train_segmenter(small_dataset, small_cfg(), log_every=0)
    assert [r["total"] for r in a.trace] == [r["total"] for r in b.trace]


def test_missing_supervision_rejected():
    lr, lr_lab, _ = make_case(1)
    samples = build_seg_dataset("c", lr, lr_lab, None, 4)
    with pytest.raises(ValueError):
        train_segmenter(samples, small_cfg(), log_every=0)
    ck = train_segmenter(samples, small_cfg(uncertainty_on=False, distill_on=False, hr_head_on=False,
                                            epochs=1), log_every=0)
    assert all(r["L_HR_seg"] == 0.0 for r in ck.trace)


def test_checkpoint_roundtrip_and_infer(small_dataset, tmp_path):
    ck = train_segmenter(small_dataset, small_cfg(epochs=1, lam=0.1), log_every=0)
    ck.save(tmp_path)
    back = SegCheckpoint.load(tmp_path)
    assert back.config == ck.config and back.config.lam == 0.1
    assert back.adaptor_state is not None
    lr = Volume(small_dataset[0].image, (4.0, 1.0, 1.0))
    lr_mask, hr_mask = infer_segmenter(lr, back)
    assert lr_mask.shape == (8, 32, 32) and hr_mask.shape == (32, 32, 32)
    assert hr_mask.spacing == (1.0, 1.0, 1.0)


@pytest.mark.slow
def test_loss_halves_over_50_epochs():
    samples = []
    for i in range(8):
        lr, lr_lab, bundle = make_case(100 + i)
        # a learnable teacher: smooth image/label channels instead of white noise
        x, y = lr.data.astype(np.float32), lr_lab.data.astype(np.float32)
        bundle.features = np.stack([x, y, ndimage.gaussian_filter(x, 1.0), 1.0 - x])
        samples += build_seg_dataset(f"c{i}", lr, lr_lab, bundle, 4, pseudo=False)
    ck = train_segmenter(samples, small_cfg(epochs=50, base_channels=8, learning_rate=3e-3), log_every=0)
    losses = ck.epoch_losses()
    assert losses[-1] <= 0.5 * losses[0]
    seg = [r["L_u_seg"] for r in ck.trace]
    assert np.mean(seg[-10:]) <= 0.5 * np.mean(seg[:10])
