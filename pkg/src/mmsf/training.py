"""Optimization loop: learning-rate schedule, sequence augmentation, detaching."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as tf

from .core import Intrinsics, SequenceSample, StereoRig
from .losses import LossReport, LossWeights, total_sequence_loss
from .network import SceneFlowNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

FULL_SCHEDULE_STEPS = 400_000
FULL_HALVING_STEPS = (150_000, 250_000, 300_000, 350_000)


@dataclass
class TrainConfig:
    total_steps: int = FULL_SCHEDULE_STEPS
    lr_initial: float = 2e-4
    lr_halving_steps: Optional[Tuple[int, ...]] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    detach_epochs: int = 2
    seq_len: int = 5
    # sequences per step; 1 means each mini-batch is a single sequence
    batch_size: int = 1
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if not self.lr_initial > 0:
            raise ValueError("lr_initial must be positive")
        if self.detach_epochs < 0:
            raise ValueError("detach_epochs must be >= 0")
        if self.seq_len < 3:
            raise ValueError("seq_len must be >= 3")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.lr_halving_steps is None:
            # keep the shape of the full schedule at any run length
            scale = self.total_steps / FULL_SCHEDULE_STEPS
            self.lr_halving_steps = tuple(int(round(s * scale)) for s in FULL_HALVING_STEPS)
        self.lr_halving_steps = tuple(sorted(self.lr_halving_steps))


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step < cfg.total_steps:
        raise ValueError("step %d outside [0, %d)" % (step, cfg.total_steps))
    k = sum(1 for s in cfg.lr_halving_steps if s <= step)
    return cfg.lr_initial * 2.0 ** (-k)


def detach_active(epoch: int, cfg: TrainConfig) -> bool:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return epoch < cfg.detach_epochs


# -- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    scale: float = 1.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    photometric: bool = False
    gamma: float = 1.0
    brightness: float = 1.0
    color: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        ok = (
            0.93 <= self.scale <= 1.0
            and abs(self.shift_x) <= 0.035 and abs(self.shift_y) <= 0.035
            and 0.8 <= self.gamma <= 1.2
            and 0.5 <= self.brightness <= 2.0
            and all(0.8 <= c <= 1.2 for c in self.color)
        )
        if not ok:
            raise ValueError("augmentation parameters out of range: %r" % (self,))


def sample_augment_params(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        flip=bool(rng.random() < 0.5),
        scale=float(rng.uniform(0.93, 1.0)),
        shift_x=float(rng.uniform(-0.035, 0.035)),
        shift_y=float(rng.uniform(-0.035, 0.035)),
        photometric=bool(rng.random() < 0.5),
        gamma=float(rng.uniform(0.8, 1.2)),
        brightness=float(rng.uniform(0.5, 2.0)),
        color=tuple(float(c) for c in rng.uniform(0.8, 1.2, size=3)),
    )


def _crop_box(h, w, p: AugmentParams):
    ch, cw = p.scale * h, p.scale * w
    # centered crop moved by the shift, kept inside the image
    x0 = min(max((w - cw) / 2 + p.shift_x * w, 0.0), w - cw)
    y0 = min(max((h - ch) / 2 + p.shift_y * h, 0.0), h - ch)
    return x0, y0, cw, ch


def _crop_resize(img, box, out_hw):
    """Resample the continuous box (x0, y0, cw, ch) of ``img`` onto an out_hw grid."""
    b, _, h, w = img.shape
    x0, y0, cw, ch = box
    oh, ow = out_hw
    if (x0, y0, cw, ch) == (0.0, 0.0, float(w), float(h)) and (oh, ow) == (h, w):
        return img
    # output pixel center j maps to x0 + (j + 0.5) * cw / ow - 0.5 in input pixels
    xs = x0 + (torch.arange(ow, dtype=img.dtype) + 0.5) * cw / ow - 0.5
    ys = y0 + (torch.arange(oh, dtype=img.dtype) + 0.5) * ch / oh - 0.5
    gx = (2 * xs + 1) / w - 1
    gy = (2 * ys + 1) / h - 1
    grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij")[::-1], -1).unsqueeze(0).expand(b, oh, ow, 2)
    return tf.grid_sample(img, grid, mode="bilinear", padding_mode="border", align_corners=False)


def _photometric(img, p: AugmentParams):
    out = img.clamp(0, 1) ** p.gamma
    out = out * p.brightness
    out = out * torch.tensor(p.color, dtype=img.dtype).view(1, 3, 1, 1)
    return out.clamp(0, 1)


def apply_augmentation(sample: SequenceSample, p: AugmentParams, out_hw=None) -> SequenceSample:
    """Apply one parameter draw to every frame of both views.

    Ground truth is dropped: it would need the same resampling and the
    training loop never reads it.
    """
    h, w = sample.hw
    out_hw = tuple(out_hw or (h, w))
    left, right = sample.left_frames, sample.right_frames
    rig = sample.rig
    if p.flip:
        if right is None:
            raise ValueError("flip augmentation needs right frames")
        # mirroring a rectified pair turns the right view into a left view
        left, right = [f.flip(-1) for f in right], [f.flip(-1) for f in left]
        rig = rig.flipped(w)

    box = _crop_box(h, w, p)
    x0, y0, cw, ch = box
    sx, sy = out_hw[1] / cw, out_hw[0] / ch
    k = rig.intrinsics
    k = replace(k, cx=k.cx - x0, cy=k.cy - y0).scaled(sx, sy)
    rig = StereoRig(k, rig.baseline)

    def tx(frames):
        if frames is None:
            return None
        out = [_crop_resize(f, box, out_hw) for f in frames]
        if p.photometric:
            out = [_photometric(f, p) for f in out]
        return out

    return SequenceSample(tx(left), rig, tx(right), None, sample.name)


def augment_sequence(sample: SequenceSample, rng: np.random.Generator, out_hw=None) -> SequenceSample:
    return apply_augmentation(sample, sample_augment_params(rng), out_hw)


def collate(samples: Sequence[SequenceSample]) -> SequenceSample:
    """Stack equally long, equally sized sequences along the batch axis.

    Intrinsics become per-item tensors; the baseline must be shared.
    """
    if len(samples) == 1:
        return samples[0]
    first = samples[0]
    if any(len(s) != len(first) or s.hw != first.hw for s in samples):
        raise ValueError("cannot batch sequences of different length or resolution")
    if any(abs(s.rig.baseline - first.rig.baseline) > 1e-12 for s in samples):
        raise ValueError("cannot batch sequences with different baselines")
    if any((s.right_frames is None) != (first.right_frames is None) for s in samples):
        raise ValueError("right frames present for only some sequences")

    def stack(frames_of):
        if frames_of(first) is None:
            return None
        return [torch.cat(fs, 0) for fs in zip(*(frames_of(s) for s in samples))]

    rig = StereoRig(Intrinsics.stack([s.rig.intrinsics for s in samples]), first.rig.baseline)
    return SequenceSample(stack(lambda s: s.left_frames), rig, stack(lambda s: s.right_frames), None,
                          "+".join(s.name for s in samples))


# -- one optimization step ----------------------------------------------------

def make_optimizer(model: SceneFlowNet, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr_initial, betas=(cfg.adam_beta1, cfg.adam_beta2),
                            weight_decay=cfg.weight_decay)


def forward_losses(model: SceneFlowNet, sample: SequenceSample, weights: LossWeights = LossWeights(),
                   detach: bool = False) -> LossReport:
    """Balanced loss over all levels for the left sequence.

    The mirrored right sequence only supplies disparities for the stereo
    occlusion masks, so it runs without autograd.
    """
    if sample.right_frames is None:
        raise ValueError("training needs right frames")
    _, _, left = model.run(sample.left_frames, sample.rig, None, detach)
    w = sample.hw[1]
    with torch.no_grad():
        _, _, right = model.run([f.flip(-1) for f in sample.right_frames], sample.rig.flipped(w))
    return total_sequence_loss(left, sample, weights, right_estimates=right, detach_disparity=detach)


def train_step(model: SceneFlowNet, sample: SequenceSample, optimizer: torch.optim.Optimizer, step: int,
               epoch: int, cfg: TrainConfig, weights: LossWeights = LossWeights()) -> LossReport:
    model.train()
    lr = lr_at_step(step, cfg)
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
    if bad:
        raise FloatingPointError("non-finite parameters at step %d (epoch %d): %s" % (step, epoch, ", ".join(bad[:5])))
    report = forward_losses(model, sample, weights, detach_active(epoch, cfg))
    if not math.isfinite(report.L_total):
        raise FloatingPointError("non-finite loss at step %d (epoch %d): %s" % (step, epoch, report.terms))
    report.total.backward()
    bad = [n for n, p in model.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
    if bad:
        raise FloatingPointError("non-finite gradient at step %d in %s" % (step, ", ".join(bad[:5])))
    optimizer.step()
    report.total = None
    return report


# -- loop -------------------------------------------------------------------------

def format_record(step: int, lr: float, report: LossReport) -> str:
    return "step=%d lr=%.6g L_total=%.6g L_d=%.6g L_sf=%.6g lambda_sf=%.6g" % (
        step, lr, report.L_total, report.L_d, report.L_sf, report.lambda_sf)


def steps_per_epoch(dataset_size: int, cfg: TrainConfig) -> int:
    return -(-dataset_size // cfg.batch_size)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def fit(model: SceneFlowNet, dataset: Sequence[SequenceSample], cfg: TrainConfig,
        weights: LossWeights = LossWeights(), out_dir: Optional[str] = None, resume: Optional[str] = None,
        train_hw=None, callback: Optional[Callable[[int, LossReport], None]] = None) -> List[LossReport]:
    """Run ``cfg.total_steps`` steps; one epoch is one pass over ``dataset``.

    Every step draws its sample index and augmentation from an RNG seeded
    with (seed, step), so a resumed run replays the uninterrupted one.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    optimizer = make_optimizer(model, cfg)
    start = 0
    if resume:
        meta = load_checkpoint(resume, model, optimizer)
        start = int(meta.get("step", 0))
    torch.manual_seed(cfg.seed)
    reports = []
    n = len(dataset)
    per_epoch = steps_per_epoch(n, cfg)
    for step in range(start, cfg.total_steps):
        epoch = step // per_epoch
        rng = _step_rng(cfg.seed, step)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        k = (step % per_epoch) * cfg.batch_size
        batch = [dataset[int(i)] for i in order[k:k + cfg.batch_size]]
        if cfg.augment:
            batch = [augment_sequence(s, rng, train_hw) for s in batch]
        sample = collate(batch)
        report = train_step(model, sample, optimizer, step, epoch, cfg, weights)
        reports.append(report)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info(format_record(step, lr_at_step(step, cfg), report))
        if callback is not None:
            callback(step, report)
        if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _save(out_dir, "step_%06d.npz" % (step + 1), model, optimizer, step + 1, epoch)
    if out_dir:
        _save(out_dir, "final.npz", model, optimizer, max(cfg.total_steps, start), cfg.total_steps // per_epoch)
    return reports


def _save(out_dir, name, model, optimizer, step, epoch):
    path = os.path.join(out_dir, name)
    try:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(path, model, optimizer, {"step": step, "epoch": epoch})
    except OSError as exc:
        raise OSError("writing checkpoint at step %d failed: %s" % (step, exc)) from exc
    return path
