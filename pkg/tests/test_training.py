import dataclasses
import math

import numpy as np
import pytest
import torch

import mmsf.training as training
from mmsf.core import Intrinsics, StereoRig
from mmsf.data.synthetic import SynthConfig, generate_synthetic_sequence
from mmsf.losses import multilevel_losses
from mmsf.network import ModelConfig, SceneFlowNet, load_checkpoint
from mmsf.training import (
    AugmentParams,
    TrainConfig,
    apply_augmentation,
    augment_sequence,
    collate,
    detach_active,
    fit,
    forward_losses,
    lr_at_step,
    make_optimizer,
    sample_augment_params,
    steps_per_epoch,
    train_step,
)

TINY = ModelConfig(num_levels=4, width_multiplier=0.125)


def test_config_validation_and_scaled_halvings():
    for bad in (dict(lr_initial=0.0), dict(detach_epochs=-1), dict(seq_len=2), dict(batch_size=0),
                dict(total_steps=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig().lr_halving_steps == (150_000, 250_000, 300_000, 350_000)
    assert TrainConfig(total_steps=2000).lr_halving_steps == (750, 1250, 1500, 1750)


@pytest.mark.parametrize("step,lr", [(0, 2e-4), (149_999, 2e-4), (150_000, 1e-4), (360_000, 1.25e-5)])
def test_lr_schedule_examples(step, lr):
    assert lr_at_step(step, TrainConfig()) == lr


def test_lr_schedule_shape():
    cfg = TrainConfig(total_steps=2000)
    lrs = [lr_at_step(s, cfg) for s in range(2000)]
    drops = sum(1 for a, b in zip(lrs, lrs[1:]) if b < a)
    assert drops == 4 and all(b <= a for a, b in zip(lrs, lrs[1:]))
    for bad in (-1, 2000):
        with pytest.raises(ValueError):
            lr_at_step(bad, cfg)


def test_detach_active_examples():
    cfg = TrainConfig()
    assert [detach_active(e, cfg) for e in range(4)] == [True, True, False, False]
    never = TrainConfig(detach_epochs=0)
    assert not any(detach_active(e, never) for e in range(3))
    with pytest.raises(ValueError):
        detach_active(-1, cfg)


def _disp_head_grads(model, sample, detach):
    _, _, levels = model.run(sample.left_frames, sample.rig, None, detach)
    L_d, L_sf, _ = multilevel_losses(levels, sample, detach_disparity=detach)
    params = model.disparity_head_parameters()
    g_sf = torch.autograd.grad(L_sf, params, retain_graph=True, allow_unused=True)
    g_d = torch.autograd.grad(L_d, params, allow_unused=True)
    norm = lambda gs: sum(0.0 if g is None else float(g.abs().sum()) for g in gs)
    return norm(g_sf), norm(g_d)


def test_detach_probe(small_sequence):
    torch.manual_seed(1)
    model = SceneFlowNet(TINY)
    cfg = TrainConfig(total_steps=10)
    sf_on, d_on = _disp_head_grads(model, small_sequence, detach_active(0, cfg))
    assert sf_on == 0.0 and d_on > 0
    sf_off, _ = _disp_head_grads(model, small_sequence, detach_active(cfg.detach_epochs, cfg))
    assert sf_off > 0


def _plain_sample():
    cfg = SynthConfig(height=32, width=64, num_frames=3, fx=50.0, fy=50.0)
    return generate_synthetic_sequence(cfg, seed=11)


def test_augmentation_deterministic_and_shape_preserving(small_sequence):
    a = augment_sequence(small_sequence, np.random.default_rng(5))
    b = augment_sequence(small_sequence, np.random.default_rng(5))
    assert len(a) == len(small_sequence) and a.hw == small_sequence.hw
    assert all(torch.equal(x, y) for x, y in zip(a.left_frames + a.right_frames, b.left_frames + b.right_frames))
    assert a.rig == b.rig
    resized = augment_sequence(small_sequence, np.random.default_rng(5), out_hw=(16, 32))
    assert resized.hw == (16, 32) and len(resized.right_frames) == len(small_sequence)


def test_augmentation_ranges():
    rng = np.random.default_rng(0)
    for _ in range(500):
        sample_augment_params(rng)  # validated on construction
    for bad in (dict(scale=0.9), dict(shift_x=0.05), dict(gamma=1.3), dict(brightness=2.5), dict(color=(1, 1, 1.3))):
        with pytest.raises(ValueError):
            AugmentParams(**bad)


def test_augmentation_same_draw_for_every_frame():
    s = _plain_sample()
    same = dataclasses.replace(s, left_frames=[s.left_frames[0]] * 3, right_frames=[s.right_frames[0]] * 3)
    out = augment_sequence(same, np.random.default_rng(3))
    assert all(torch.equal(out.left_frames[0], f) for f in out.left_frames)
    assert all(torch.equal(out.right_frames[0], f) for f in out.right_frames)


def test_flip_is_an_involution():
    s = _plain_sample()
    p = AugmentParams(flip=True)
    once = apply_augmentation(s, p)
    assert torch.equal(once.left_frames[0], s.right_frames[0].flip(-1))
    twice = apply_augmentation(once, p)
    assert all(torch.equal(x, y) for x, y in zip(twice.left_frames, s.left_frames))
    assert all(torch.equal(x, y) for x, y in zip(twice.right_frames, s.right_frames))
    assert twice.rig == s.rig


def test_flip_keeps_stereo_geometry():
    """The mirrored right view, used as a left view, is matched by the mirrored right-view disparity."""
    cfg = SynthConfig(height=32, width=64, num_frames=2, num_objects=0, background_slope=0.0,
                      background_depth=10.0, background_velocity=(0.0, 0.0, 0.0))
    s = generate_synthetic_sequence(cfg, seed=2)
    f = apply_augmentation(s, AugmentParams(flip=True))
    # constant 5 px disparity; the new pair must still be a left/right pair with positive disparity
    from mmsf.geometry import backward_warp

    d = torch.full((1, 1, 32, 64), 5.0)
    warped, mask = backward_warp(f.right_frames[0], torch.cat((-d, torch.zeros_like(d)), 1))
    err = ((warped - f.left_frames[0]).abs() * mask).amax()
    assert float(err) < 1e-5


def test_gamma_follows_power_law():
    probes = torch.tensor([0.2, 0.5, 0.9])
    img = probes.view(1, 1, 1, 3).expand(1, 3, 2, 3).contiguous()
    s = dataclasses.replace(_plain_sample(), left_frames=[img] * 3, right_frames=[img] * 3, gt=None)
    out = apply_augmentation(s, AugmentParams(photometric=True, gamma=1.2))
    assert torch.allclose(out.left_frames[0][0, 0, 0], probes ** 1.2, atol=1e-7)


def test_photometric_output_clamped():
    s = _plain_sample()
    out = apply_augmentation(s, AugmentParams(photometric=True, brightness=2.0, color=(1.2, 1.2, 1.2), gamma=0.8))
    for f in out.left_frames + out.right_frames:
        assert float(f.min()) >= 0 and float(f.max()) <= 1


def test_crop_rescales_intrinsics_consistently():
    s = _plain_sample()
    h, w = s.hw
    k0 = s.rig.intrinsics
    for p in (AugmentParams(scale=0.93, shift_x=0.03, shift_y=-0.02), AugmentParams(scale=0.97, shift_x=-0.035)):
        out = apply_augmentation(s, p, out_hw=(16, 32))
        k = out.rig.intrinsics
        x0, y0, cw, ch = training._crop_box(h, w, p)
        j = np.arange(32)
        x = x0 + (j + 0.5) * cw / 32 - 0.5
        # the ray through output pixel j is the ray through its source position x
        np.testing.assert_allclose((j - k.cx) / k.fx, (x - k0.cx) / k0.fx, atol=1e-12)
        i = np.arange(16)
        y = y0 + (i + 0.5) * ch / 16 - 0.5
        np.testing.assert_allclose((i - k.cy) / k.fy, (y - k0.cy) / k0.fy, atol=1e-12)


def test_zero_weight_decay_leaves_zero_grad_parameter_unchanged(tiny_model):
    opt = make_optimizer(tiny_model, TrainConfig(total_steps=1))
    before = [p.detach().clone() for p in tiny_model.parameters()]
    for p in tiny_model.parameters():
        p.grad = torch.zeros_like(p)
    first = next(tiny_model.parameters())
    first.grad = torch.ones_like(first)
    opt.step()
    after = list(tiny_model.parameters())
    assert not torch.equal(after[0], before[0])
    assert all(torch.equal(a, b) for a, b in zip(after[1:], before[1:]))


def test_train_step_needs_right_frames(tiny_model, small_sequence):
    cfg = TrainConfig(total_steps=1)
    mono = dataclasses.replace(small_sequence, right_frames=None)
    with pytest.raises(ValueError):
        train_step(tiny_model, mono, make_optimizer(tiny_model, cfg), 0, 0, cfg)


def test_train_step_aborts_on_nan(tiny_model, small_sequence):
    cfg = TrainConfig(total_steps=1)
    with torch.no_grad():
        tiny_model.decoders[0].sf_head[-1].bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="step 0"):
        train_step(tiny_model, small_sequence, make_optimizer(tiny_model, cfg), 0, 0, cfg)


def _run(steps, **kw):
    torch.manual_seed(0)
    model = SceneFlowNet(TINY)
    cfg = TrainConfig(total_steps=steps, seed=4, **kw)
    return model, fit(model, [_short(3), _short(4)], cfg)


_cache = {}


def _short(seed):
    if seed not in _cache:
        cfg = SynthConfig(height=32, width=64, num_frames=5, fx=50.0, fy=50.0)
        _cache[seed] = generate_synthetic_sequence(cfg, seed=seed)
    return _cache[seed]


def test_same_seed_same_reports():
    _, a = _run(10)
    _, b = _run(10)
    assert [r.as_record() for r in a] == [r.as_record() for r in b]
    assert all(math.isfinite(r.L_total) for r in a)


def test_zero_steps_leaves_model_unchanged(tmp_path):
    torch.manual_seed(0)
    model = SceneFlowNet(TINY)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    reports = fit(model, [_short(3)], TrainConfig(total_steps=0), out_dir=str(tmp_path))
    assert reports == []
    assert all(torch.equal(v, before[k]) for k, v in model.state_dict().items())
    restored = SceneFlowNet(TINY)
    load_checkpoint(tmp_path / "final.npz", restored)
    assert all(torch.equal(v, before[k]) for k, v in restored.state_dict().items())


def test_resume_replays_uninterrupted_run(tmp_path):
    torch.manual_seed(0)
    model = SceneFlowNet(TINY)
    cfg = TrainConfig(total_steps=4, seed=4, checkpoint_every=2)
    full = fit(model, [_short(3), _short(4)], cfg, out_dir=str(tmp_path))
    resumed_model = SceneFlowNet(TINY)
    rest = fit(resumed_model, [_short(3), _short(4)], cfg, resume=str(tmp_path / "step_000002.npz"))
    assert [r.as_record() for r in rest] == [r.as_record() for r in full[2:]]
    for a, b in zip(model.parameters(), resumed_model.parameters()):
        assert torch.equal(a, b)


@pytest.mark.parametrize("n,batch,epochs", [(3, 1, [0, 0, 0, 1, 1, 1, 2]), (3, 2, [0, 0, 1, 1, 2, 2, 3])])
def test_epoch_counting(monkeypatch, n, batch, epochs):
    seen = []

    def fake_step(model, sample, optimizer, step, epoch, cfg, weights):
        seen.append((epoch, sample.name))
        return training.LossReport(0.0, 0.0, 0.0, 0.0)

    monkeypatch.setattr(training, "train_step", fake_step)
    data = [dataclasses.replace(_short(3), name="s%d" % i) for i in range(n)]
    cfg = TrainConfig(total_steps=7, batch_size=batch, augment=False)
    fit(SceneFlowNet(TINY), data, cfg)
    assert [e for e, _ in seen] == epochs
    assert steps_per_epoch(n, cfg) == -(-n // batch)
    if batch == 1:
        # every epoch visits every sequence once
        for e in range(2):
            assert sorted(name for ep, name in seen if ep == e) == ["s0", "s1", "s2"]


def test_collate_batches_sequences(tiny_model):
    s = _short(3)
    batch = collate([s, s])
    assert batch.left_frames[0].shape[0] == 2 and torch.is_tensor(batch.rig.intrinsics.fx)
    with torch.no_grad():
        single = forward_losses(tiny_model, s)
        double = forward_losses(tiny_model, batch)
    assert double.L_total == pytest.approx(single.L_total, rel=1e-5)
    other = dataclasses.replace(s, rig=StereoRig(Intrinsics(50.0, 50.0, 31.5, 15.5), 0.3))
    with pytest.raises(ValueError):
        collate([s, other])


def test_fit_with_batches_runs():
    _, reports = _run(2, batch_size=2)
    assert len(reports) == 2 and all(math.isfinite(r.L_total) for r in reports)
