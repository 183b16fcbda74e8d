"""Self-supervised proxy loss: occlusion-aware census, smoothness, 3D point terms."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn.functional as tf

from .core import EstimateBundle, SequenceSample, StereoRig, disparity_to_depth, pixel_grid
from .geometry import (
    _backproject,
    backward_warp,
    disocclusion_mask,
    points_from_disparity,
    reproject_with_sceneflow,
    right_to_left_occlusion,
)

CENSUS_RADIUS = 3
EPS_BALANCE = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_d_sm: float = 0.1
    lambda_sf_pt: float = 0.2
    lambda_sf_sm: float = 1000.0
    beta_edge: float = 150.0
    sigma_G: float = 0.1
    sigma_T: float = 0.9
    census_eps: float = 1e-8

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise ValueError("%s must be positive" % name)


@dataclass
class LossReport:
    L_total: float
    L_d: float
    L_sf: float
    lambda_sf: float
    terms: Dict[str, float] = field(default_factory=dict)
    total: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def as_record(self) -> Dict[str, float]:
        return {"L_total": self.L_total, "L_d": self.L_d, "L_sf": self.L_sf, "lambda_sf": self.lambda_sf}


def ternary_value(diff, sigma_T: float = 0.9):
    return diff / torch.sqrt(diff ** 2 + sigma_T ** 2)


def geman_mcclure(t1, t2, sigma_G: float = 0.1):
    sq = (t1 - t2) ** 2
    return sq / (sq + sigma_G)


def luminance(img: torch.Tensor) -> torch.Tensor:
    # 8-bit-like scale; sigma_T = 0.9 is an intensity-level constant
    return img.mean(1, keepdim=True) * 255.0


def _window(x: torch.Tensor, mode: str) -> torch.Tensor:
    """(B,1,H,W) -> (B,49,H,W) of 7x7 neighbours, offset index (dy+3)*7 + (dx+3)."""
    b, _, h, w = x.shape
    r = CENSUS_RADIUS
    if mode == "replicate":
        xp = tf.pad(x, (r, r, r, r), mode="replicate")
    else:
        xp = tf.pad(x, (r, r, r, r), mode="constant", value=0.0)
    k = 2 * r + 1
    # strided view + one copy; cheaper than im2col on CPU
    win = xp[:, 0].unfold(1, k, 1).unfold(2, k, 1)
    return win.permute(0, 3, 4, 1, 2).reshape(b, k * k, h, w)


def _census_distance(I, J, weights: LossWeights):
    li, lj = luminance(I), luminance(J)
    ti = ternary_value(_window(li, "replicate") - li, weights.sigma_T)
    tj = ternary_value(_window(lj, "replicate") - lj, weights.sigma_T)
    return geman_mcclure(ti, tj, weights.sigma_G)


def _window_adjoint(g: torch.Tensor) -> torch.Tensor:
    """Adjoint of ``_window(., "replicate")``: (B,49,H,W) -> (B,1,H,W)."""
    b, k2, h, w = g.shape
    r = CENSUS_RADIUS
    k = 2 * r + 1
    p = tf.fold(g.reshape(b, k2, h * w), (h + 2 * r, w + 2 * r), k)
    # replicate padding copied edge rows/cols outwards; send their mass back
    p[:, :, r] += p[:, :, :r].sum(2)
    p[:, :, -r - 1] += p[:, :, -r:].sum(2)
    p[..., r] += p[..., :r].sum(-1)
    p[..., -r - 1] += p[..., -r:].sum(-1)
    return p[:, :, r:-r, r:-r]


class _OccCensus(torch.autograd.Function):
    """Fused occlusion-aware census with a hand-written backward.

    The autograd version keeps a dozen (B,49,H,W) temporaries alive and was
    the bulk of the training step; this keeps five.
    """

    @staticmethod
    def forward(ctx, I, J, O, sigma_T, sigma_G, eps):
        def transform(img):
            lum = luminance(img)
            diff = _window(lum, "replicate") - lum
            rs = torch.rsqrt(diff * diff + sigma_T ** 2)
            return diff * rs, rs

        ti, ri = transform(I)
        tj, rj = transform(J)
        a = ti - tj
        u = a * a
        den = u + sigma_G
        o_win = _window(O, "zeros")
        per_pixel = (u / den * o_win).sum(1, keepdim=True) / (o_win.sum(1, keepdim=True) + eps)
        visible = O.sum()
        ctx.empty = bool(visible <= 0)
        if ctx.empty:
            return I.new_zeros(())
        wpix = O / ((o_win.sum(1, keepdim=True) + eps) * (visible + eps))
        ctx.sigmas = (sigma_T, sigma_G)
        ctx.channels = (I.shape[1], J.shape[1])
        ctx.save_for_backward(ri, rj, a, den, o_win, wpix)
        return (per_pixel * O).sum() / (visible + eps)

    @staticmethod
    def backward(ctx, grad):
        if ctx.empty:
            return None, None, None, None, None, None
        ri, rj, a, den, o_win, wpix = ctx.saved_tensors
        sigma_T, sigma_G = ctx.sigmas
        # d loss / d ti; the tj derivative is its negative
        common = (2 * sigma_G * sigma_T ** 2) * grad * wpix * o_win * a / (den * den)

        def to_image(g_diff, channels):
            g_lum = _window_adjoint(g_diff) - g_diff.sum(1, keepdim=True)
            return (g_lum * (255.0 / channels)).expand(-1, channels, -1, -1)

        dI = dJ = None
        if ctx.needs_input_grad[0]:
            dI = to_image(common * ri ** 3, ctx.channels[0])
        if ctx.needs_input_grad[1]:
            dJ = to_image(-common * rj ** 3, ctx.channels[1])
        return dI, dJ, None, None, None, None


def occlusion_aware_census(I, I_tilde, O, weights: LossWeights = LossWeights()):
    """Census distance averaged over visible window members and visible pixels."""
    if I.shape != I_tilde.shape:
        raise ValueError("image shapes differ: %s vs %s" % (tuple(I.shape), tuple(I_tilde.shape)))
    O = O.detach().to(I_tilde.dtype)
    return _OccCensus.apply(I, I_tilde, O, weights.sigma_T, weights.sigma_G, weights.census_eps)


def standard_census(I, I_tilde, weights: LossWeights = LossWeights()):
    """Occlusion-unaware reference: all 49 terms on every pixel."""
    return _census_distance(I, I_tilde, weights).mean()


def edge_aware_smoothness_2nd(field, guide, beta: float = 150.0, normalizer=None):
    """Edge-aware second-order smoothness, summed over interior pixels / pixel count.

    Channel second differences are combined with an L1 norm; the image edge
    weight uses the channel-mean absolute forward difference of ``guide``.
    """
    b, _, h, w = field.shape
    total = field.new_zeros(())
    if w >= 3:
        d2x = (field[..., :-2] + field[..., 2:] - 2 * field[..., 1:-1]).abs().sum(1, keepdim=True)
        gx = (guide[..., 2:] - guide[..., 1:-1]).abs().mean(1, keepdim=True)
        tx = d2x * torch.exp(-beta * gx)
        if normalizer is not None:
            tx = tx / normalizer[..., 1:-1]
        total = total + tx.sum()
    if h >= 3:
        d2y = (field[..., :-2, :] + field[..., 2:, :] - 2 * field[..., 1:-1, :]).abs().sum(1, keepdim=True)
        gy = (guide[..., 2:, :] - guide[..., 1:-1, :]).abs().mean(1, keepdim=True)
        ty = d2y * torch.exp(-beta * gy)
        if normalizer is not None:
            ty = ty / normalizer[..., 1:-1, :]
        total = total + ty.sum()
    return total / (b * h * w)


def disparity_loss(d, I_left, I_right, rig: Optional[StereoRig] = None, weights: LossWeights = LossWeights(),
                   d_right=None):
    """Stereo view-synthesis loss for the left view. Returns (loss, terms)."""
    flow = torch.cat((-d, torch.zeros_like(d)), 1)
    I_synth, inb = backward_warp(I_right, flow)
    if d_right is not None:
        O = right_to_left_occlusion(d_right.detach())
    else:
        O = torch.ones_like(d)
    O = O * inb
    photo = occlusion_aware_census(I_left, I_synth, O, weights)
    # smoothness on width-normalized disparity
    smooth = edge_aware_smoothness_2nd(d / d.shape[-1], I_left, weights.beta_edge)
    loss = photo + weights.lambda_d_sm * smooth
    return loss, {"d_photo": photo, "d_smooth": smooth}


def _channel_norm(x):
    # linalg.vector_norm over dim 1 is ~10x slower on CPU. Zero vectors give an
    # exact 0 with a zero (not NaN) gradient.
    sq = x.pow(2).sum(1, keepdim=True)
    nz = sq > 0
    return torch.where(nz, sq, torch.ones_like(sq)).sqrt() * nz


def point_reconstruction_loss(d_t, d_tp1, s_f, O, rig: StereoRig):
    """Relative 3D distance between points moved by ``s_f`` and the points seen at t+1."""
    h, w = d_t.shape[-2:]
    grid = pixel_grid(h, w, d_t)
    depth_t = disparity_to_depth(d_t, rig)
    depth_tp1 = disparity_to_depth(d_tp1, rig)
    pts = _backproject(grid, depth_t, rig.intrinsics)
    flow, valid = reproject_with_sceneflow(d_t, s_f, rig)
    depth_s, inb = backward_warp(depth_tp1, flow)
    depth_s = torch.where(inb > 0, depth_s, torch.ones_like(depth_s))
    pts_next = _backproject(grid + flow, depth_s, rig.intrinsics)
    dist = _channel_norm(pts + s_f - pts_next)
    rel = dist / _channel_norm(pts)
    mask = O.to(d_t.dtype) * valid * inb
    denom = mask.sum()
    if denom <= 0:
        # an exact 0 that still belongs to the graph
        return (rel * mask).sum()
    return (rel * mask).sum() / denom


def sceneflow_loss(I_t, I_tp1, d_t, s_f, d_tp1, s_b_tp1, rig: StereoRig, weights: LossWeights = LossWeights()):
    """One temporal direction: estimates at t against frame t+1. Returns (loss, terms)."""
    flow, valid = reproject_with_sceneflow(d_t, s_f, rig)
    I_synth, inb = backward_warp(I_tp1, flow)
    with torch.no_grad():
        flow_back, _ = reproject_with_sceneflow(d_tp1, s_b_tp1, rig)
        O = disocclusion_mask(flow_back)
    photo = occlusion_aware_census(I_t, I_synth, O * inb * valid.detach(), weights)
    point = point_reconstruction_loss(d_t, d_tp1, s_f, O, rig)
    dist = _channel_norm(points_from_disparity(d_t, rig))
    smooth = edge_aware_smoothness_2nd(s_f, I_t, weights.beta_edge, normalizer=dist)
    loss = photo + weights.lambda_sf_pt * point + weights.lambda_sf_sm * smooth
    return loss, {"sf_photo": photo, "sf_point": point, "sf_smooth": smooth}


def pair_sceneflow_loss(I_a, I_b, est_a: EstimateBundle, est_b: EstimateBundle, rig: StereoRig,
                        weights: LossWeights = LossWeights(), detach_disparity: bool = False):
    """Both directions between neighbouring estimates a (earlier) and b (later), averaged."""
    d_a, d_b = est_a.d, est_b.d
    if detach_disparity:
        d_a, d_b = d_a.detach(), d_b.detach()
    fwd, t_f = sceneflow_loss(I_a, I_b, d_a, est_a.s_f, d_b, est_b.s_b, rig, weights)
    bwd, t_b = sceneflow_loss(I_b, I_a, d_b, est_b.s_b, d_a, est_a.s_f, rig, weights)
    terms = {k: (t_f[k] + t_b[k]) / 2 for k in t_f}
    return (fwd + bwd) / 2, terms


def balance(L_d: torch.Tensor, L_sf: torch.Tensor, terms=None) -> LossReport:
    """Combine with lambda_sf = L_d / L_sf, held constant for the gradient."""
    lam = (L_d / torch.clamp(L_sf, min=EPS_BALANCE)).detach()
    total = L_d + lam * L_sf
    return LossReport(
        L_total=float(total.detach()),
        L_d=float(L_d.detach()),
        L_sf=float(L_sf.detach()),
        lambda_sf=float(lam),
        terms={k: float(torch.as_tensor(v).detach()) for k, v in (terms or {}).items()},
        total=total,
    )


def _add_terms(acc, terms, scale=1.0):
    for k, v in terms.items():
        acc[k] = acc.get(k, 0.0) + v * scale


def sequence_loss_terms(estimates: Sequence[EstimateBundle], sample: SequenceSample, frame_ids: Sequence[int],
                        weights: LossWeights = LossWeights(), right_estimates=None, detach_disparity=False):
    """Unbalanced (L_d, L_sf, terms) for one set of per-time-step estimates at input resolution."""
    if len(estimates) < 2:
        raise ValueError("need estimates for at least 2 time steps")
    rig = sample.rig
    terms: Dict[str, torch.Tensor] = {}

    d_losses = []
    for k, (est, t) in enumerate(zip(estimates, frame_ids)):
        I_l = sample.left_frames[t]
        if sample.right_frames is not None:
            I_r = sample.right_frames[t]
            d_r = None
            if right_estimates is not None:
                d_r = right_estimates[k].d.flip(-1)
            loss, tm = disparity_loss(est.d, I_l, I_r, rig, weights, d_right=d_r)
            d_losses.append(loss)
            _add_terms(terms, tm, 1.0 / len(estimates))
    if not d_losses:
        raise ValueError("disparity loss needs right frames")
    L_d = torch.stack(d_losses).mean()

    sf_losses = []
    for k in range(len(estimates) - 1):
        a, b = frame_ids[k], frame_ids[k + 1]
        loss, tm = pair_sceneflow_loss(sample.left_frames[a], sample.left_frames[b], estimates[k], estimates[k + 1],
                                       rig, weights, detach_disparity)
        sf_losses.append(loss)
        _add_terms(terms, tm, 1.0 / (len(estimates) - 1))
    L_sf = torch.stack(sf_losses).mean()
    return L_d, L_sf, terms


def level_loss_resolution(h: int, w: int, full_h: int, full_w: int):
    """Resolution at which a level decoded at (h, w) is penalized: twice its own, capped at the input."""
    return min(2 * h, full_h), min(2 * w, full_w)


def sample_at_resolution(sample: SequenceSample, h: int, w: int) -> SequenceSample:
    """Frames (area-averaged when shrinking) and rig at (h, w); ground truth dropped."""
    H, W = sample.hw
    if (h, w) == (H, W):
        return sample

    def resize(frames):
        if frames is None:
            return None
        return [tf.interpolate(f, size=(h, w), mode="bilinear", align_corners=False, antialias=True) for f in frames]

    return SequenceSample(resize(sample.left_frames), sample.rig.at_resolution(h, w, H, W),
                          resize(sample.right_frames), None, sample.name)


def multilevel_losses(estimates, sample: SequenceSample, weights: LossWeights = LossWeights(), frame_ids=None,
                      right_estimates=None, detach_disparity: bool = False):
    """Unbalanced (L_d, L_sf, terms) summed over pyramid levels.

    ``estimates`` is either one list of per-step bundles, penalized at their
    own resolution, or a list of such lists, one per pyramid level as the
    network emits them. Each level is resampled to ``level_loss_resolution``
    and compared against frames shrunk to match. ``right_estimates`` mirrors
    ``estimates`` for the horizontally flipped right-view sequence.
    """
    H, W = sample.hw
    if estimates and isinstance(estimates[0], EstimateBundle):
        levels = [list(estimates)]
        right_levels = [right_estimates]
        targets = [tuple(estimates[0].d.shape[-2:])]
    else:
        levels = [list(lv) for lv in estimates]
        right_levels = list(right_estimates) if right_estimates is not None else [None] * len(levels)
        targets = [level_loss_resolution(*lv[0].d.shape[-2:], H, W) for lv in levels]
    n = len(levels[0])
    if frame_ids is None:
        frame_ids = _default_frame_ids(n, len(sample))
    L_d = L_sf = 0
    terms: Dict[str, torch.Tensor] = {}
    for ests, rights, (h, w) in zip(levels, right_levels, targets):
        ests = [e.rescaled(h, w) for e in ests]
        if rights is not None:
            rights = [e.rescaled(h, w) for e in rights]
        ld, lsf, tm = sequence_loss_terms(ests, sample_at_resolution(sample, h, w), frame_ids, weights, rights,
                                          detach_disparity)
        L_d = L_d + ld
        L_sf = L_sf + lsf
        _add_terms(terms, tm)
    return L_d, L_sf, terms


def total_sequence_loss(estimates, sample: SequenceSample, weights: LossWeights = LossWeights(), frame_ids=None,
                        right_estimates=None, detach_disparity: bool = False) -> LossReport:
    """Balanced sequence loss; levels are summed with weight 1 before balancing."""
    return balance(*multilevel_losses(estimates, sample, weights, frame_ids, right_estimates, detach_disparity))


def _default_frame_ids(n_estimates: int, n_frames: int) -> List[int]:
    if n_estimates == n_frames:
        return list(range(n_frames))
    if n_estimates == n_frames - 2:
        return list(range(1, n_frames - 1))
    raise ValueError("cannot infer frame ids for %d estimates over %d frames" % (n_estimates, n_frames))
