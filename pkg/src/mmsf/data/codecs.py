"""16-bit PNG interchange formats for disparity and optical flow (KITTI layout)."""
from __future__ import annotations

from typing import Tuple

import cv2
import numpy as np

DISP_SCALE = 256.0
FLOW_SCALE = 64.0
FLOW_OFFSET = 2 ** 15


def _png(img: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", img)
    if not ok:
        raise IOError("PNG encoding failed")
    return buf.tobytes()


def _unpng(data: bytes) -> np.ndarray:
    img = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ValueError("not a decodable PNG")
    if img.dtype != np.uint16:
        raise ValueError("expected a 16-bit PNG, got %s" % img.dtype)
    return img


def encode_disparity_png16(d: np.ndarray, valid: np.ndarray = None) -> bytes:
    """(H,W) disparity -> PNG bytes; pixels outside ``valid`` are stored as 0."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError("disparity must be 2-D, got shape %s" % (d.shape,))
    valid = np.ones(d.shape, bool) if valid is None else np.asarray(valid, bool)
    codes = np.round(d[valid] * DISP_SCALE)
    # code 0 means invalid and uint16 tops out at 65535
    bad = int((~((codes >= 1) & (codes <= 65535))).sum())
    if bad:
        raise ValueError("disparity not encodable (needs 1/512 <= d < 255.998) at %d pixel(s)" % bad)
    stored = np.zeros(d.shape, np.uint16)
    stored[valid] = codes
    return _png(stored)


def decode_disparity_png16(data: bytes) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (disparity float64, valid bool); invalid pixels hold 0."""
    raw = _unpng(data)
    if raw.ndim != 2:
        raise ValueError("disparity PNG must be single-channel")
    return raw.astype(np.float64) / DISP_SCALE, raw > 0


def encode_flow_png16(flow: np.ndarray, valid: np.ndarray = None) -> bytes:
    """(2,H,W) flow -> 3-channel PNG bytes (u, v, valid) in KITTI encoding."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError("flow must have shape (2,H,W), got %s" % (flow.shape,))
    valid = np.ones(flow.shape[1:], bool) if valid is None else np.asarray(valid, bool)
    mag = np.abs(flow[:, valid])
    if mag.size and not (mag < 512).all():
        bad = int((~(mag < 512)).any(0).sum())
        raise ValueError("flow component magnitude must be < 512; %d pixel(s) outside" % bad)
    uv = np.where(valid, np.round(flow * FLOW_SCALE + FLOW_OFFSET), FLOW_OFFSET)
    if (uv > 65535).any():
        raise ValueError("flow component too close to 512 to encode")
    img = np.stack((uv[0], uv[1], valid.astype(np.float64)), -1).astype(np.uint16)
    # OpenCV writes BGR; keep the file in the (u, v, valid) RGB order
    return _png(img[..., ::-1])


def decode_flow_png16(data: bytes) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (flow (2,H,W) float64, valid bool)."""
    raw = _unpng(data)
    if raw.ndim != 3 or raw.shape[-1] != 3:
        raise ValueError("flow PNG must have 3 channels")
    raw = raw[..., ::-1].astype(np.float64)
    valid = raw[..., 2] > 0
    flow = (np.moveaxis(raw[..., :2], -1, 0) - FLOW_OFFSET) / FLOW_SCALE
    return np.where(valid, flow, 0.0), valid


def write_png(path: str, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)


def read_png(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()
