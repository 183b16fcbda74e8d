"""Domain types, camera model and small field utilities.

All image-like tensors are NCHW, origin top-left, x to the right, y down.
Pixel coordinates address pixel centers: pixel (x, y) = column x, row y.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Union

import torch
import torch.nn.functional as tf

Scalar = Union[float, torch.Tensor]


def _positive(value: Scalar) -> bool:
    if torch.is_tensor(value):
        return bool((value > 0).all())
    return value > 0


def _finite(value: Scalar) -> bool:
    if torch.is_tensor(value):
        return bool(torch.isfinite(value).all())
    return value == value and abs(value) != float("inf")


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels.

    Fields may be python floats (shared by the batch) or 1-D tensors holding
    one value per batch item (needed once augmentation crops differ).
    """

    fx: Scalar
    fy: Scalar
    cx: Scalar
    cy: Scalar

    def __post_init__(self):
        if not (_positive(self.fx) and _positive(self.fy)):
            raise ValueError("focal lengths must be positive")
        if not (_finite(self.cx) and _finite(self.cy)):
            raise ValueError("principal point must be finite")

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        # pixel-center convention, consistent with align_corners=False resampling
        return Intrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
        )

    def flipped(self, width: int) -> "Intrinsics":
        return replace(self, cx=(width - 1) - self.cx)

    def values(self, like: torch.Tensor):
        """(fx, fy, cx, cy) broadcastable against an NCHW tensor ``like``."""
        out = []
        for v in (self.fx, self.fy, self.cx, self.cy):
            if torch.is_tensor(v):
                v = v.to(dtype=like.dtype, device=like.device).reshape(-1, 1, 1, 1)
                n = like.shape[0]
                # the network stacks temporal directions along the batch axis
                if v.shape[0] not in (1, n):
                    if n % v.shape[0]:
                        raise ValueError("intrinsics batch %d incompatible with %d" % (v.shape[0], n))
                    v = v.repeat(n // v.shape[0], 1, 1, 1)
            out.append(v)
        return tuple(out)

    @staticmethod
    def stack(items: Sequence["Intrinsics"]) -> "Intrinsics":
        def col(name):
            return torch.tensor([float(getattr(k, name)) for k in items], dtype=torch.float64)

        return Intrinsics(col("fx"), col("fy"), col("cx"), col("cy"))

    def to_list(self) -> List[float]:
        return [float(self.fx), float(self.fy), float(self.cx), float(self.cy)]


@dataclass(frozen=True)
class StereoRig:
    intrinsics: Intrinsics
    baseline: float

    def __post_init__(self):
        if not self.baseline > 0:
            raise ValueError("baseline must be positive, got %r" % (self.baseline,))

    @property
    def focal_baseline(self) -> Scalar:
        return self.intrinsics.fx * self.baseline

    def scaled(self, sx: float, sy: float) -> "StereoRig":
        return StereoRig(self.intrinsics.scaled(sx, sy), self.baseline)

    def at_resolution(self, h: int, w: int, full_h: int, full_w: int) -> "StereoRig":
        return self.scaled(w / full_w, h / full_h)

    def flipped(self, width: int) -> "StereoRig":
        return StereoRig(self.intrinsics.flipped(width), self.baseline)


def _fb(rig: StereoRig, like: torch.Tensor):
    fx = rig.intrinsics.values(like)[0]
    return fx * rig.baseline


def disparity_to_depth(d: torch.Tensor, rig: StereoRig) -> torch.Tensor:
    bad = int((~(d > 0)).sum())
    if bad:
        raise ValueError("disparity must be positive; %d offending pixel(s)" % bad)
    return _fb(rig, d) / d


def depth_to_disparity(depth: torch.Tensor, rig: StereoRig) -> torch.Tensor:
    bad = int((~(depth > 0)).sum())
    if bad:
        raise ValueError("depth must be positive; %d offending pixel(s)" % bad)
    return _fb(rig, depth) / depth


def average_disparities(d_f: torch.Tensor, d_b: torch.Tensor) -> torch.Tensor:
    if d_f.shape != d_b.shape:
        raise ValueError("shape mismatch: %s vs %s" % (tuple(d_f.shape), tuple(d_b.shape)))
    return (d_f + d_b) / 2


FIELD_KINDS = ("flow", "disparity", "sceneflow", "feature")


def rescale_to_level(field: torch.Tensor, target_h: int, target_w: int, kind: str = "flow") -> torch.Tensor:
    """Bilinearly resample an NCHW field to (target_h, target_w).

    ``kind`` controls value scaling: optical flow and disparity are in pixels
    and scale with the resolution; metric scene flow and features do not.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target dims must be >= 1, got %dx%d" % (target_h, target_w))
    if kind not in FIELD_KINDS:
        raise ValueError("unknown field kind %r" % kind)
    h, w = field.shape[-2:]
    if (h, w) == (target_h, target_w):
        return field
    out = tf.interpolate(field, size=(target_h, target_w), mode="bilinear", align_corners=False)
    if kind == "flow":
        scale = torch.tensor([target_w / w, target_h / h], dtype=out.dtype, device=out.device)
        out = out * scale.view(1, 2, 1, 1)
    elif kind == "disparity":
        out = out * (target_w / w)
    return out


@functools.lru_cache(maxsize=64)
def _grid(h: int, w: int, dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack((xs, ys), 0).unsqueeze(0)


def pixel_grid(h: int, w: int, like: torch.Tensor) -> torch.Tensor:
    """(1, 2, h, w) tensor of pixel-center coordinates (x, y).

    Cached and shared between callers, so treat it as read-only.
    """
    return _grid(h, w, like.dtype, like.device)


@dataclass
class LSTMState:
    h: torch.Tensor
    c: torch.Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ValueError("hidden and cell state shapes differ")

    @staticmethod
    def zeros(shape, like: torch.Tensor) -> "LSTMState":
        z = like.new_zeros(shape)
        return LSTMState(z, z.clone())


@dataclass
class EstimateBundle:
    """Estimates for one time step; ``d`` is always the mean of ``d_f`` and ``d_b``.

    ``s_f``/``s_b`` may be None at sequence ends in two-frame mode.
    """

    s_f: Optional[torch.Tensor]
    s_b: Optional[torch.Tensor]
    d_f: torch.Tensor
    d_b: torch.Tensor
    d: torch.Tensor = None

    def __post_init__(self):
        mean = average_disparities(self.d_f, self.d_b)
        if self.d is None:
            self.d = mean
        elif not torch.equal(self.d, mean):
            raise ValueError("d must equal (d_f + d_b) / 2")
        shape = self.d.shape[-2:]
        for s in (self.s_f, self.s_b):
            if s is not None and s.shape[-2:] != shape:
                raise ValueError("estimate resolutions differ")

    def map(self, fn_sf, fn_d) -> "EstimateBundle":
        return EstimateBundle(
            s_f=None if self.s_f is None else fn_sf(self.s_f),
            s_b=None if self.s_b is None else fn_sf(self.s_b),
            d_f=fn_d(self.d_f),
            d_b=fn_d(self.d_b),
        )

    def rescaled(self, h: int, w: int) -> "EstimateBundle":
        return self.map(
            lambda s: rescale_to_level(s, h, w, "sceneflow"),
            lambda d: rescale_to_level(d, h, w, "disparity"),
        )

    def detached(self) -> "EstimateBundle":
        return self.map(torch.Tensor.detach, torch.Tensor.detach)


@dataclass
class GroundTruth:
    """Per-frame ground truth; every list is indexed by frame.

    ``disp``: disparity at t; ``disp_future``: disparity of the displaced point
    at t+1 expressed at pixel p of t; ``flow``/``sceneflow``: t -> t+1.
    ``valid``: pixel has a defined correspondence in frame t+1 (in view, in
    front of the camera); ``visible``: additionally not occluded at t+1.
    Entries for the last frame are None where the quantity needs t+1.
    """

    disp: List[torch.Tensor]
    disp_future: List[Optional[torch.Tensor]] = field(default_factory=list)
    flow: List[Optional[torch.Tensor]] = field(default_factory=list)
    sceneflow: List[Optional[torch.Tensor]] = field(default_factory=list)
    valid: List[Optional[torch.Tensor]] = field(default_factory=list)
    visible: List[Optional[torch.Tensor]] = field(default_factory=list)
    texture_seed: Optional[int] = None


@dataclass
class SequenceSample:
    left_frames: List[torch.Tensor]
    rig: StereoRig
    right_frames: Optional[List[torch.Tensor]] = None
    gt: Optional[GroundTruth] = None
    name: str = ""

    def __post_init__(self):
        if not self.left_frames:
            raise ValueError("empty sequence")
        shape = self.left_frames[0].shape
        if any(f.shape != shape for f in self.left_frames):
            raise ValueError("frames differ in resolution")
        if self.right_frames is not None:
            if len(self.right_frames) != len(self.left_frames):
                raise ValueError("left/right frame counts differ")
            if any(f.shape != shape for f in self.right_frames):
                raise ValueError("right frames differ in resolution")

    def __len__(self):
        return len(self.left_frames)

    @property
    def hw(self):
        return tuple(self.left_frames[0].shape[-2:])
