"""Color coding for scene flow (CIE-LAB) and disparity."""
from __future__ import annotations

from typing import Optional

import cv2
import numpy as np
import torch
from skimage.color import lab2rgb

ANCHOR_L = 50.0
L_RANGE = 40.0
CHROMA_RANGE = 80.0


def _as_chw(sf) -> np.ndarray:
    arr = sf.detach().cpu().numpy() if torch.is_tensor(sf) else np.asarray(sf)
    arr = arr.astype(np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("expected a single scene-flow map, got batch %d" % arr.shape[0])
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("scene flow must be (3,H,W), got %s" % (arr.shape,))
    return arr


def default_max_norm(sf) -> float:
    mag = np.sqrt((_as_chw(sf) ** 2).sum(0))
    m = float(np.percentile(mag, 95))
    return m if m > 0 else 1.0


def sceneflow_to_lab(sf, max_norm: Optional[float] = None) -> np.ndarray:
    """(3,H,W) scene flow -> (H,W,3) LAB, before any gamut clamping.

    The normalized vector lives in the unit ball; x and z span the a/b chroma
    plane and y moves lightness around a mid-gray anchor (up is brighter).
    """
    v = _as_chw(sf)
    if max_norm is None:
        max_norm = default_max_norm(v)
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    v = v / max_norm
    mag = np.sqrt((v ** 2).sum(0, keepdims=True))
    v = v / np.maximum(mag, 1.0)
    lab = np.stack((ANCHOR_L - L_RANGE * v[1], CHROMA_RANGE * v[0], CHROMA_RANGE * v[2]), -1)
    return lab


def sceneflow_to_rgb(sf, max_norm: Optional[float] = None) -> np.ndarray:
    rgb = lab2rgb(sceneflow_to_lab(sf, max_norm))
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def disparity_to_rgb(d, max_disp: Optional[float] = None) -> np.ndarray:
    arr = d.detach().cpu().numpy() if torch.is_tensor(d) else np.asarray(d)
    arr = np.squeeze(arr.astype(np.float64))
    if arr.ndim != 2:
        raise ValueError("disparity must be a single map")
    top = max_disp or float(np.percentile(arr, 99)) or 1.0
    gray = np.round(np.clip(arr / top, 0, 1) * 255).astype(np.uint8)
    bgr = cv2.applyColorMap(gray, cv2.COLORMAP_MAGMA)
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
