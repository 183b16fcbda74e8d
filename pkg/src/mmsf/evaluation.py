"""KITTI-style scene-flow outlier rates, end-point errors and temporal consistency."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Union

import torch

from .core import EstimateBundle, SequenceSample, StereoRig
from .geometry import backward_warp, future_disparity, reproject_with_sceneflow

ABS_THRESHOLD = 3.0
REL_THRESHOLD = 0.05
KEYS = ("d1", "d2", "flow")


def _check(est, gt, valid):
    if est.shape != gt.shape:
        raise ValueError("estimate %s and ground truth %s differ in shape" % (tuple(est.shape), tuple(gt.shape)))
    if valid.shape[-2:] != gt.shape[-2:] or valid.shape[0] != gt.shape[0]:
        raise ValueError("mask shape %s does not match %s" % (tuple(valid.shape), tuple(gt.shape)))


def _magnitude(x: torch.Tensor) -> torch.Tensor:
    return x.abs() if x.shape[1] == 1 else x.pow(2).sum(1, keepdim=True).sqrt()


def outlier_map(est: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Boolean (B,1,H,W): valid pixels whose error exceeds both 3 px and 5 % of |gt|."""
    _check(est, gt, valid)
    err = _magnitude(est - gt)
    inlier = (err <= ABS_THRESHOLD) | (err <= REL_THRESHOLD * _magnitude(gt))
    return (valid > 0) & ~inlier


def epe(est: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor) -> float:
    _check(est, gt, valid)
    mask = (valid > 0).expand_as(est[:, :1])
    n = int(mask.sum())
    if n == 0:
        raise ValueError("epe over an empty mask")
    return float(_magnitude(est - gt)[mask].sum() / n)


@dataclass
class MetricReport:
    d1_all: float
    d2_all: float
    fl_all: float
    sf_all: float
    epe_flow: float
    epe_sf: float
    n_valid: int

    @property
    def undefined(self) -> bool:
        return self.n_valid == 0

    def as_record(self) -> Dict[str, float]:
        return asdict(self)

    def table(self) -> str:
        rows = [
            ("D1-all", "%.2f" % self.d1_all),
            ("D2-all", "%.2f" % self.d2_all),
            ("Fl-all", "%.2f" % self.fl_all),
            ("SF-all", "%.2f" % self.sf_all),
            ("EPE-flow", "%.4f" % self.epe_flow),
            ("EPE-sf", "%.4f" % self.epe_sf),
        ]
        head = "  ".join("%8s" % k for k, _ in rows)
        vals = "  ".join("%8s" % v for _, v in rows)
        return "%s\n%s\n(n_valid=%d)" % (head, vals, self.n_valid)


class MetricAccumulator:
    """Pools outlier counts and error sums over many frames before dividing."""

    def __init__(self):
        self.outliers = dict.fromkeys(KEYS + ("sf",), 0)
        self.counts = dict.fromkeys(KEYS + ("sf",), 0)
        self.err_sum = {"flow": 0.0, "sf3d": 0.0}
        self.err_n = {"flow": 0, "sf3d": 0}

    def add(self, est: Mapping[str, torch.Tensor], gt: Mapping[str, torch.Tensor],
            valid: Union[torch.Tensor, Mapping[str, torch.Tensor]]):
        masks = {k: (valid[k] if isinstance(valid, Mapping) else valid) > 0 for k in KEYS}
        maps = {k: outlier_map(est[k], gt[k], masks[k]) for k in KEYS}
        joint = masks["d1"] & masks["d2"] & masks["flow"]
        sf_out = (maps["d1"] | maps["d2"] | maps["flow"]) & joint
        for k in KEYS:
            self.outliers[k] += int(maps[k].sum())
            self.counts[k] += int(masks[k].sum())
        self.outliers["sf"] += int(sf_out.sum())
        self.counts["sf"] += int(joint.sum())
        self.err_sum["flow"] += float(_magnitude(est["flow"] - gt["flow"])[masks["flow"]].sum())
        self.err_n["flow"] += int(masks["flow"].sum())
        if est.get("sf") is not None and gt.get("sf") is not None:
            self.err_sum["sf3d"] += float(_magnitude(est["sf"] - gt["sf"])[masks["flow"]].sum())
            self.err_n["sf3d"] += int(masks["flow"].sum())
        return self

    def report(self) -> MetricReport:
        def rate(k):
            return 100.0 * self.outliers[k] / self.counts[k] if self.counts[k] else math.nan

        def mean(k):
            return self.err_sum[k] / self.err_n[k] if self.err_n[k] else math.nan

        return MetricReport(rate("d1"), rate("d2"), rate("flow"), rate("sf"), mean("flow"), mean("sf3d"),
                            self.counts["sf"])


def scene_flow_metrics(est: Mapping[str, torch.Tensor], gt: Mapping[str, torch.Tensor],
                       valid: Union[torch.Tensor, Mapping[str, torch.Tensor]]) -> MetricReport:
    """Outlier rates for {d1, d2, flow} maps (optionally 'sf' for the 3D EPE).

    ``valid`` is one mask for all maps or a mapping with one per key; SF-all
    counts a pixel when any of the three maps is an outlier there, over the
    intersection of the masks.
    """
    return MetricAccumulator().add(est, gt, valid).report()


def predictions_from_estimate(est: EstimateBundle, rig: StereoRig) -> Dict[str, torch.Tensor]:
    """Disparity, future disparity and optical flow implied by (d, s_f)."""
    d = est.d.double()
    s = est.s_f.double()
    d2, _ = future_disparity(d, s[:, 2:3], rig)
    flow, _ = reproject_with_sceneflow(d, s, rig)
    return {"d1": d, "d2": d2, "flow": flow, "sf": s}


def ground_truth_maps(sample: SequenceSample, t: int):
    """(maps, masks) for frame t of a sample carrying GT; None if incomplete."""
    gt = sample.gt
    if gt is None or t >= len(gt.flow) or gt.flow[t] is None or gt.disp[t] is None or gt.disp_future[t] is None:
        return None
    d1, d2, flow = gt.disp[t].double(), gt.disp_future[t].double(), gt.flow[t].double()
    valid = gt.valid[t] if gt.valid and gt.valid[t] is not None else torch.ones_like(d1)
    maps = {"d1": d1, "d2": d2, "flow": flow}
    if gt.sceneflow and gt.sceneflow[t] is not None:
        maps["sf"] = gt.sceneflow[t].double()
    masks = {"d1": d1 > 0, "d2": (valid > 0) & (d2 > 0), "flow": valid > 0}
    return maps, masks


def evaluate_estimates(estimates: List[EstimateBundle], sample: SequenceSample, frame_ids: List[int],
                       acc: Optional[MetricAccumulator] = None) -> MetricAccumulator:
    acc = acc or MetricAccumulator()
    for est, t in zip(estimates, frame_ids):
        if est.s_f is None:
            continue
        ref = ground_truth_maps(sample, t)
        if ref is None:
            continue
        acc.add(predictions_from_estimate(est, sample.rig), *ref)
    return acc


def temporal_consistency_aepe(sf_t: torch.Tensor, sf_tp1: torch.Tensor, gt_flow_t: torch.Tensor,
                              valid: torch.Tensor) -> float:
    """Mean distance between s_t(p) and s_{t+1}(p + flow_t(p)) over valid in-view pixels."""
    if sf_t.shape != sf_tp1.shape:
        raise ValueError("scene flow shapes differ")
    warped, inb = backward_warp(sf_tp1, gt_flow_t.to(sf_tp1.dtype))
    mask = (valid > 0) & (inb > 0)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("temporal consistency over an empty mask")
    return float(_magnitude(sf_t - warped)[mask].sum() / n)


def predict_sequence(model, sample: SequenceSample):
    """Run ``model`` over a whole sequence; returns (estimates, frame ids)."""
    model.eval()
    with torch.no_grad():
        estimates, _ = model(sample.left_frames, sample.rig)
    n = len(sample)
    frame_ids = list(range(n)) if len(estimates) == n else list(range(1, n - 1))
    return estimates, frame_ids


def evaluate_model(model, samples: List[SequenceSample]) -> MetricReport:
    acc = MetricAccumulator()
    for sample in samples:
        estimates, frame_ids = predict_sequence(model, sample)
        evaluate_estimates(estimates, sample, frame_ids, acc)
    return acc.report()
