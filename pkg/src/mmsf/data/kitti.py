"""Directory-based stereo sequences in a KITTI-like layout.

    root/scene_xx/image_left/000000.png    8-bit RGB frames
    root/scene_xx/image_right/000000.png
    root/scene_xx/calib.txt                "fx fy cx cy baseline" on one line
    root/scene_xx/{disp,disp_future,flow}/000000.png   optional 16-bit GT
"""
from __future__ import annotations

import logging
import os
import re
from typing import List, Optional

import cv2
import numpy as np
import torch

from ..core import GroundTruth, Intrinsics, SequenceSample, StereoRig
from .codecs import (
    decode_disparity_png16,
    decode_flow_png16,
    encode_disparity_png16,
    encode_flow_png16,
    read_png,
    write_png,
)

log = logging.getLogger(__name__)

_FRAME = re.compile(r"^(\d+)\.png$")


def read_calib(path: str) -> StereoRig:
    if not os.path.isfile(path):
        raise FileNotFoundError("missing calibration file %s" % path)
    with open(path) as fh:
        fields = fh.read().split()
    if len(fields) != 5:
        raise ValueError("%s: expected 'fx fy cx cy baseline', got %d value(s)" % (path, len(fields)))
    fx, fy, cx, cy, baseline = (float(v) for v in fields)
    return StereoRig(Intrinsics(fx, fy, cx, cy), baseline)


def write_calib(path: str, rig: StereoRig) -> None:
    k = rig.intrinsics
    with open(path, "w") as fh:
        fh.write("%.10g %.10g %.10g %.10g %.10g\n" % (float(k.fx), float(k.fy), float(k.cx), float(k.cy),
                                                       rig.baseline))


def read_image(path: str) -> torch.Tensor:
    img = cv2.imread(path, cv2.IMREAD_COLOR)
    if img is None:
        raise IOError("cannot read image %s" % path)
    rgb = cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1))).unsqueeze(0)


def write_image(path: str, img: torch.Tensor) -> None:
    arr = img.detach()[0].clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    arr = np.round(arr * 255.0).astype(np.uint8)
    if not cv2.imwrite(path, cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)):
        raise IOError("cannot write image %s" % path)


def _frame_ids(folder: str) -> List[int]:
    if not os.path.isdir(folder):
        return []
    return sorted(int(m.group(1)) for m in map(_FRAME.match, os.listdir(folder)) if m)


def _windows(ids: List[int], seq_len: int) -> List[List[int]]:
    """Sliding windows of ``seq_len`` consecutive frame numbers."""
    present = set(ids)
    return [list(range(i, i + seq_len)) for i in ids if all(j in present for j in range(i, i + seq_len))]


def _to_tensor(a: np.ndarray) -> torch.Tensor:
    a = a[None] if a.ndim == 2 else a
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64)).unsqueeze(0)


def _read_gt(scene: str, frames: List[int]) -> Optional[GroundTruth]:
    names = {k: os.path.join(scene, k) for k in ("disp", "disp_future", "flow")}
    if not any(os.path.isdir(p) for p in names.values()):
        return None
    gt = GroundTruth(disp=[])
    for f in frames:
        fname = "%06d.png" % f

        def load(kind, decode):
            path = os.path.join(names[kind], fname)
            return decode(read_png(path)) if os.path.isfile(path) else None

        disp = load("disp", decode_disparity_png16)
        fut = load("disp_future", decode_disparity_png16)
        flow = load("flow", decode_flow_png16)
        gt.disp.append(None if disp is None else _to_tensor(disp[0]))
        gt.disp_future.append(None if fut is None else _to_tensor(fut[0]))
        gt.flow.append(None if flow is None else _to_tensor(flow[0]))
        gt.valid.append(None if flow is None else _to_tensor(flow[1].astype(np.float64)))
        gt.sceneflow.append(None)
        gt.visible.append(None)
    return gt


def load_kitti_dir(path: str, seq_len: Optional[int] = 5, with_gt: bool = True) -> List[SequenceSample]:
    """All windows of ``seq_len`` consecutive frames, never crossing scenes.

    ``seq_len=None`` yields each scene's longest run of consecutive frames
    starting at its first frame as one sample. A window whose right view is
    missing any frame is skipped with a warning.
    """
    if not os.path.isdir(path):
        raise FileNotFoundError("dataset directory %s does not exist" % path)
    samples = []
    for scene in sorted(os.listdir(path)):
        root = os.path.join(path, scene)
        left_dir = os.path.join(root, "image_left")
        if not os.path.isdir(left_dir):
            continue
        rig = read_calib(os.path.join(root, "calib.txt"))
        right_ids = set(_frame_ids(os.path.join(root, "image_right")))
        ids = _frame_ids(left_dir)
        if seq_len is None:
            run = 0
            while ids and run < len(ids) and ids[run] == ids[0] + run:
                run += 1
            windows = [ids[:run]] if run else []
        else:
            windows = _windows(ids, seq_len)
        for window in windows:
            missing = [i for i in window if i not in right_ids]
            if missing:
                log.warning("%s: skipping frames %d-%d, no right image for %s", scene, window[0], window[-1],
                            ", ".join("%06d" % i for i in missing))
                continue
            left = [read_image(os.path.join(left_dir, "%06d.png" % i)) for i in window]
            right = [read_image(os.path.join(root, "image_right", "%06d.png" % i)) for i in window]
            gt = _read_gt(root, window) if with_gt else None
            samples.append(SequenceSample(left, rig, right, gt, name="%s/%06d" % (scene, window[0])))
    return samples


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach()[0].cpu().numpy()


def write_scene(root: str, name: str, sample: SequenceSample, first_frame: int = 0) -> str:
    """Write ``sample`` (batch size 1) as one scene directory; returns its path."""
    if sample.left_frames[0].shape[0] != 1:
        raise ValueError("write_scene expects batch size 1")
    scene = os.path.join(root, name)
    dirs = ["image_left", "image_right"] + (["disp", "disp_future", "flow"] if sample.gt is not None else [])
    for d in dirs:
        os.makedirs(os.path.join(scene, d), exist_ok=True)
    write_calib(os.path.join(scene, "calib.txt"), sample.rig)
    for k, img in enumerate(sample.left_frames):
        fname = "%06d.png" % (first_frame + k)
        write_image(os.path.join(scene, "image_left", fname), img)
        if sample.right_frames is not None:
            write_image(os.path.join(scene, "image_right", fname), sample.right_frames[k])
        gt = sample.gt
        if gt is None:
            continue
        valid = _np(gt.valid[k])[0] > 0 if k < len(gt.valid) and gt.valid[k] is not None else None
        if gt.disp[k] is not None:
            write_png(os.path.join(scene, "disp", fname), encode_disparity_png16(_np(gt.disp[k])[0]))
        if k < len(gt.disp_future) and gt.disp_future[k] is not None:
            write_png(os.path.join(scene, "disp_future", fname),
                      encode_disparity_png16(_np(gt.disp_future[k])[0], valid))
        if k < len(gt.flow) and gt.flow[k] is not None:
            write_png(os.path.join(scene, "flow", fname), encode_flow_png16(_np(gt.flow[k]), valid))
    return scene
