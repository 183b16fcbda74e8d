"""Analytic piecewise-planar scenes with exact ground truth.

A slanted textured background plane plus fronto-parallel textured rectangles,
each translating with a constant 3D velocity (meters per frame). Views are
ray-cast per pixel center, so disparity, scene flow, optical flow and
visibility follow in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch

from ..core import GroundTruth, Intrinsics, SequenceSample, StereoRig

Z_MIN_SCENE = 0.5


class OctaveTexture:
    """Band-limited RGB value noise on the plane, periodic with ``period`` cells."""

    def __init__(self, seed: int, cell: float = 1.6, octaves: int = 3, period: int = 64):
        rng = np.random.default_rng(seed)
        self.cell = cell
        self.octaves = octaves
        self.period = period
        self.grids = [rng.uniform(-1, 1, size=(period, period, 3)) for _ in range(octaves)]
        self.base = rng.uniform(0.35, 0.65, size=3)

    @staticmethod
    def _lerp_grid(g, u, v):
        n = g.shape[0]
        u0 = np.floor(u)
        v0 = np.floor(v)
        fu = (u - u0)[..., None]
        fv = (v - v0)[..., None]
        # smoothstep fade keeps the texture C1 across cells
        fu = fu * fu * (3 - 2 * fu)
        fv = fv * fv * (3 - 2 * fv)
        i0 = u0.astype(np.int64) % n
        j0 = v0.astype(np.int64) % n
        i1 = (i0 + 1) % n
        j1 = (j0 + 1) % n
        return ((1 - fu) * (1 - fv) * g[j0, i0] + fu * (1 - fv) * g[j0, i1]
                + (1 - fu) * fv * g[j1, i0] + fu * fv * g[j1, i1])

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.zeros(u.shape + (3,))
        amp, total = 1.0, 0.0
        for k, g in enumerate(self.grids):
            scale = self.cell / 2 ** k
            out += amp * self._lerp_grid(g, u / scale, v / scale)
            total += amp
            amp *= 0.5
        return np.clip(self.base + 0.45 * out / total, 0.0, 1.0)


@dataclass
class RectObject:
    center: Tuple[float, float, float]
    size: Tuple[float, float]
    velocity: Tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 128
    num_frames: int = 5
    fx: float = 100.0
    fy: float = 100.0
    cx: Optional[float] = None
    cy: Optional[float] = None
    baseline: float = 0.5
    background_depth: float = 20.0
    # plane normal (0, slope, 1): rows further down are closer
    background_slope: float = 1.0
    background_velocity: Tuple[float, float, float] = (0.0, 0.0, -0.3)
    num_objects: int = 2
    objects: Optional[List[RectObject]] = None
    object_depth: Tuple[float, float] = (6.0, 12.0)
    object_size: Tuple[float, float] = (1.5, 3.0)
    max_speed: float = 0.3
    texture_cell: float = 1.6
    texture_seed: Optional[int] = None

    def __post_init__(self):
        if self.num_frames < 2:
            raise ValueError("num_frames must be >= 2")
        if self.height < 1 or self.width < 1:
            raise ValueError("bad resolution")

    def rig(self) -> StereoRig:
        cx = (self.width - 1) / 2 if self.cx is None else self.cx
        cy = (self.height - 1) / 2 if self.cy is None else self.cy
        return StereoRig(Intrinsics(self.fx, self.fy, cx, cy), self.baseline)


class SyntheticScene:
    def __init__(self, cfg: SynthConfig, seed: int = 0):
        self.cfg = cfg
        self.rig = cfg.rig()
        rng = np.random.default_rng(seed)
        tex_seed = cfg.texture_seed if cfg.texture_seed is not None else int(rng.integers(2 ** 31))
        self.texture_seed = tex_seed
        if cfg.objects is not None:
            self.objects = list(cfg.objects)
        else:
            self.objects = [self._random_object(rng) for _ in range(cfg.num_objects)]
        self.textures = [OctaveTexture(tex_seed + k, cfg.texture_cell) for k in range(len(self.objects) + 1)]
        self.bg_velocity = np.asarray(cfg.background_velocity, dtype=np.float64)
        self._check()

    def _random_object(self, rng) -> RectObject:
        cfg = self.cfg
        k = self.rig.intrinsics
        z = rng.uniform(*cfg.object_depth)
        # keep the center inside the middle of the view
        px = rng.uniform(0.25, 0.75) * cfg.width
        py = rng.uniform(0.3, 0.7) * cfg.height
        x = (px - k.cx) / k.fx * z
        y = (py - k.cy) / k.fy * z
        size = (rng.uniform(*cfg.object_size), rng.uniform(*cfg.object_size) * 0.7)
        vel = rng.uniform(-cfg.max_speed, cfg.max_speed, size=3) * np.array([1.0, 0.3, 1.0])
        return RectObject((x, y, z), size, tuple(vel))

    def _check(self):
        cfg = self.cfg
        n = cfg.num_frames
        k = self.rig.intrinsics
        for t in (0, n):
            for obj in self.objects:
                if obj.center[2] + obj.velocity[2] * t < Z_MIN_SCENE:
                    raise ValueError("object moves behind the camera by frame %d" % t)
            ry = (np.array([0.0, cfg.height - 1.0]) - k.cy) / k.fy
            denom = 1 + cfg.background_slope * ry
            c = cfg.background_depth + (cfg.background_slope * self.bg_velocity[1] + self.bg_velocity[2]) * t
            if (denom <= 0).any() or c <= 0 or (c / denom).min() < Z_MIN_SCENE:
                raise ValueError("background plane not in front of the camera at frame %d" % t)

    # -- ray casting -----------------------------------------------------

    def cast(self, px: np.ndarray, py: np.ndarray, t: float, origin_x: float = 0.0):
        """Nearest surface along the rays through pixel coords (px, py) at time t.

        Returns (depth, surface id, color); id 0 is the background.
        """
        k = self.rig.intrinsics
        rx = (px - k.cx) / k.fx
        ry = (py - k.cy) / k.fy
        s = self.cfg.background_slope
        v = self.bg_velocity
        c = self.cfg.background_depth + (s * v[1] + v[2]) * t
        depth = c / (1 + s * ry)
        ids = np.zeros(px.shape, dtype=np.int64)
        for i, obj in enumerate(self.objects, start=1):
            z = obj.center[2] + obj.velocity[2] * t
            X = origin_x + rx * z
            Y = ry * z
            cxo = obj.center[0] + obj.velocity[0] * t
            cyo = obj.center[1] + obj.velocity[1] * t
            hit = (np.abs(X - cxo) <= obj.size[0] / 2) & (np.abs(Y - cyo) <= obj.size[1] / 2) & (z < depth)
            depth = np.where(hit, z, depth)
            ids = np.where(hit, i, ids)
        color = np.zeros(px.shape + (3,))
        for i in range(len(self.objects) + 1):
            sel = ids == i
            if not sel.any():
                continue
            u, w = self._uv(i, rx[sel], ry[sel], depth[sel], t, origin_x)
            color[sel] = self.textures[i](u, w)
        return depth, ids, color

    def _uv(self, i, rx, ry, depth, t, origin_x):
        X = origin_x + rx * depth
        Y = ry * depth
        Z = depth
        if i == 0:
            v = self.bg_velocity
            s = self.cfg.background_slope
            X0, Y0, Z0 = X - v[0] * t, Y - v[1] * t, Z - v[2] * t
            return X0, (Y0 - s * Z0) / np.sqrt(1 + s * s)
        obj = self.objects[i - 1]
        return (X - obj.center[0] - obj.velocity[0] * t + 7.3 * i,
                Y - obj.center[1] - obj.velocity[1] * t + 3.1 * i)

    def velocity_of(self, ids: np.ndarray) -> np.ndarray:
        table = np.stack([self.bg_velocity] + [np.asarray(o.velocity, dtype=np.float64) for o in self.objects])
        return table[ids]

    def pixel_grid(self):
        h, w = self.cfg.height, self.cfg.width
        py, px = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        return px, py

    def render(self, t: float, view: str = "left") -> np.ndarray:
        px, py = self.pixel_grid()
        origin = 0.0 if view == "left" else self.rig.baseline
        _, _, color = self.cast(px, py, t, origin)
        return color

    def ground_truth(self, t: float, dt: int = 1):
        """Exact GT from frame t towards frame t + dt (dt = +1 or -1), left view."""
        k = self.rig.intrinsics
        fb = k.fx * self.rig.baseline
        px, py = self.pixel_grid()
        depth, ids, _ = self.cast(px, py, t)
        vel = self.velocity_of(ids) * dt
        X = (px - k.cx) / k.fx * depth
        Y = (py - k.cy) / k.fy * depth
        Xn, Yn, Zn = X + vel[..., 0], Y + vel[..., 1], depth + vel[..., 2]
        front = Zn > 1e-3
        Zs = np.where(front, Zn, 1.0)
        qx = k.fx * Xn / Zs + k.cx
        qy = k.fy * Yn / Zs + k.cy
        h, w = depth.shape
        # in view = within the pixel area of the image
        inside = front & (qx >= -0.5) & (qx <= w - 0.5) & (qy >= -0.5) & (qy <= h - 0.5)
        d_next, ids_next, _ = self.cast(np.where(inside, qx, 0.0), np.where(inside, qy, 0.0), t + dt)
        visible = inside & (ids_next == ids) & (np.abs(d_next - Zn) < 1e-6 * np.maximum(Zn, 1.0))
        return {
            "disp": fb / depth,
            "disp_future": np.where(front, fb / Zs, 0.0),
            "flow": np.stack((qx - px, qy - py), 0),
            "sceneflow": np.moveaxis(vel, -1, 0),
            "valid": inside,
            "visible": visible,
            "ids": ids,
        }


def _t(a: np.ndarray, dtype=torch.float64, channel_last=False) -> torch.Tensor:
    a = np.asarray(a)
    if a.ndim == 2:
        a = a[None]
    elif channel_last:
        a = np.moveaxis(a, -1, 0)
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype).unsqueeze(0)


def generate_synthetic_sequence(cfg: SynthConfig = None, seed: int = 0, image_dtype=torch.float32) -> SequenceSample:
    cfg = cfg or SynthConfig()
    scene = SyntheticScene(cfg, seed)
    left, right = [], []
    gt = GroundTruth(disp=[], texture_seed=scene.texture_seed)
    for t in range(cfg.num_frames):
        left.append(_t(scene.render(t, "left"), image_dtype, True))
        right.append(_t(scene.render(t, "right"), image_dtype, True))
        g = scene.ground_truth(t, +1)
        gt.disp.append(_t(g["disp"]))
        gt.disp_future.append(_t(g["disp_future"]))
        gt.flow.append(_t(g["flow"]))
        gt.sceneflow.append(_t(g["sceneflow"]))
        gt.valid.append(_t(g["valid"]))
        gt.visible.append(_t(g["visible"]))
    return SequenceSample(left, scene.rig, right, gt, name="synth_%d" % seed)
