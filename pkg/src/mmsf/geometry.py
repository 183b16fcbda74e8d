"""Differentiable warping and projection operators."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import Intrinsics, StereoRig, disparity_to_depth, pixel_grid

Z_MIN = 1e-3
OCC_THRESHOLD = 0.5


@dataclass(frozen=True)
class SplatConfig:
    mode: str = "softmax"
    alpha: float = 10.0

    def __post_init__(self):
        if self.mode not in ("sum", "softmax"):
            raise ValueError("mode must be 'sum' or 'softmax'")
        if not (self.alpha > 0 and self.alpha < float("inf")):
            raise ValueError("alpha must be finite and positive")


def backproject(coords: torch.Tensor, depth: torch.Tensor, K: Intrinsics) -> torch.Tensor:
    """Lift pixels (B,2,H,W) with depth (B,1,H,W) to camera points (B,3,H,W)."""
    if not bool((depth > 0).all()):
        raise ValueError("depth must be positive")
    return _backproject(coords, depth, K)


def _backproject(coords, depth, K):
    fx, fy, cx, cy = K.values(depth)
    x = (coords[:, 0:1] - cx) / fx * depth
    y = (coords[:, 1:2] - cy) / fy * depth
    return torch.cat((x, y, depth.expand_as(x)), 1)


def project(points: torch.Tensor, K: Intrinsics) -> torch.Tensor:
    fx, fy, cx, cy = K.values(points)
    z = points[:, 2:3].clamp(min=Z_MIN)
    return torch.cat((fx * points[:, 0:1] / z + cx, fy * points[:, 1:2] / z + cy), 1)


def points_from_disparity(d: torch.Tensor, rig: StereoRig) -> torch.Tensor:
    depth = disparity_to_depth(d, rig)
    h, w = d.shape[-2:]
    return _backproject(pixel_grid(h, w, d), depth, rig.intrinsics)


def reproject_with_sceneflow(d: torch.Tensor, s: torch.Tensor, rig: StereoRig):
    """Optical flow induced by scene flow ``s`` on points at disparity ``d``.

    Returns (flow (B,2,H,W), valid (B,1,H,W)); valid is 0 where the displaced
    depth falls below ``Z_MIN``.
    """
    depth = disparity_to_depth(d, rig)
    h, w = d.shape[-2:]
    grid = pixel_grid(h, w, d)
    fx, fy, cx, cy = rig.intrinsics.values(d)
    z_new = depth + s[:, 2:3]
    valid = (z_new > Z_MIN).to(d.dtype)
    z_new = z_new.clamp(min=Z_MIN)
    # fx*X == (x - cx)*Z, so the flow needs no explicit X and is exactly 0 for s = 0
    u = (fx * s[:, 0:1] - (grid[:, 0:1] - cx) * s[:, 2:3]) / z_new
    v = (fy * s[:, 1:2] - (grid[:, 1:2] - cy) * s[:, 2:3]) / z_new
    return torch.cat((u, v), 1), valid


def future_disparity(d: torch.Tensor, s_z: torch.Tensor, rig: StereoRig):
    """Disparity of the displaced point, at the reference pixel. Returns (d2, valid)."""
    fb = rig.intrinsics.values(d)[0] * rig.baseline
    depth = disparity_to_depth(d, rig)
    valid = (depth + s_z > Z_MIN).to(d.dtype)
    denom = 1 + s_z * d / fb
    denom = torch.where(valid > 0, denom, torch.ones_like(denom))
    return d / denom * valid, valid


def _bilinear_taps(flow: torch.Tensor):
    """Flat indices, weights and in-bounds flags of the 4 bilinear taps of p + flow.

    All three come back as (B, 1, 4*H*W), taps ordered (0,0), (1,0), (0,1), (1,1)
    and then by source pixel; weights of out-of-bounds taps are zero.
    """
    b, _, h, w = flow.shape
    q = pixel_grid(h, w, flow) + flow
    q0 = torch.floor(q.detach())
    frac = (q - q0).view(b, 2, 1, h * w)
    x0 = q0[:, 0].long().view(b, 1, h * w)
    y0 = q0[:, 1].long().view(b, 1, h * w)
    xs = torch.cat((x0, x0 + 1, x0, x0 + 1), 1)
    ys = torch.cat((y0, y0, y0 + 1, y0 + 1), 1)
    wx = torch.cat((1 - frac[:, 0], frac[:, 0]), 1)
    wy = torch.cat((1 - frac[:, 1], frac[:, 1]), 1)
    wt = wx.repeat(1, 2, 1) * wy.repeat_interleave(2, 1)
    inb = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    idx = ys.clamp(0, h - 1) * w + xs.clamp(0, w - 1)
    n4 = 4 * h * w
    return idx.view(b, 1, n4), (wt * inb).view(b, 1, n4), inb.view(b, 1, n4)


def backward_warp(img: torch.Tensor, flow: torch.Tensor):
    """Bilinear sample of ``img`` at p + flow(p); zero outside.

    Returns (warped, mask); mask is 1 where the sample point lies inside the
    pixel-center hull [0, W-1] x [0, H-1].
    """
    b, c, h, w = img.shape
    if flow.shape[0] != b or flow.shape[-2:] != (h, w):
        raise ValueError("flow shape %s incompatible with image %s" % (tuple(flow.shape), tuple(img.shape)))
    n = h * w
    idx, wt, _ = _bilinear_taps(flow)
    taps = img.reshape(b, c, n).gather(2, idx.expand(b, c, 4 * n)) * wt
    t = taps.view(b, c, 4, n)
    # same summation order as the scalar formula
    out = ((t[:, :, 0] + t[:, :, 1]) + t[:, :, 2]) + t[:, :, 3]
    q = pixel_grid(h, w, flow) + flow
    mask = (q[:, 0:1] >= 0) & (q[:, 0:1] <= w - 1) & (q[:, 1:2] >= 0) & (q[:, 1:2] <= h - 1)
    return out.view(b, c, h, w), mask.to(img.dtype)


def softmax_splat(src, flow, importance=None, cfg: SplatConfig = SplatConfig()):
    """Forward-warp ``src`` along ``flow`` with bilinear splatting.

    Sum mode adds kernel-weighted values. Softmax mode weights each source
    by exp(alpha * importance) and normalizes by the splatted weight; the
    exponent is shifted per target by the largest contributing logit, which
    leaves the normalized result unchanged but avoids overflow.
    """
    b, c, h, w = src.shape
    if flow.shape[0] != b or flow.shape[-2:] != (h, w):
        raise ValueError("flow shape %s incompatible with source %s" % (tuple(flow.shape), tuple(src.shape)))
    n = h * w
    idx, wt, _ = _bilinear_taps(flow)
    flat = src.reshape(b, c, n).repeat(1, 1, 4)
    if cfg.mode == "sum":
        return src.new_zeros(b, c, n).scatter_add(2, idx.expand(b, c, 4 * n), flat * wt).view(b, c, h, w)

    if importance is None:
        raise ValueError("softmax splatting needs an importance map")
    logit = (cfg.alpha * importance.reshape(b, 1, n)).repeat(1, 1, 4)
    neg_inf = torch.full_like(logit, float("-inf"))
    cand = torch.where(wt > 0, logit, neg_inf).detach()
    peak = torch.full_like(importance.reshape(b, 1, n), float("-inf")).scatter_reduce(
        2, idx, cand, reduce="amax", include_self=True)
    z = torch.where(wt > 0, logit - peak.gather(2, idx), neg_inf)
    kw = wt * torch.exp(z)
    num = src.new_zeros(b, c, n).scatter_add(2, idx.expand(b, c, 4 * n), flat * kw)
    den = src.new_zeros(b, 1, n).scatter_add(2, idx, kw)
    # den is either 0 (nothing landed) or at least the winning tap's kernel weight
    hit = den > 0
    return (num / torch.where(hit, den, torch.ones_like(den)) * hit).view(b, c, h, w)


@torch.no_grad()
def disocclusion_mask(flow_from_next_to_cur: torch.Tensor) -> torch.Tensor:
    """Visibility of the current frame: 1 where splatted mass from the next frame >= 0.5."""
    b, _, h, w = flow_from_next_to_cur.shape
    ones = flow_from_next_to_cur.new_ones(b, 1, h, w)
    mass = softmax_splat(ones, flow_from_next_to_cur, cfg=SplatConfig(mode="sum"))
    return (mass >= OCC_THRESHOLD).to(flow_from_next_to_cur.dtype)


@torch.no_grad()
def right_to_left_occlusion(d_right: torch.Tensor) -> torch.Tensor:
    """Left-view visibility from the right-view disparity (right pixel x maps to x + d)."""
    flow = torch.cat((d_right, torch.zeros_like(d_right)), 1)
    return disocclusion_mask(flow)
