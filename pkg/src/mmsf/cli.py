"""Command-line entry points: synth, train, eval, infer, visualize.

Exit status: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import glob
import logging
import os
import sys
from typing import List, Optional

import cv2
import numpy as np
import torch
import yaml

from .config import RunConfig, dump_config, load_config
from .data.codecs import (
    decode_disparity_png16,
    decode_flow_png16,
    encode_disparity_png16,
    encode_flow_png16,
    read_png,
    write_png,
)
from .data.kitti import load_kitti_dir, write_scene
from .data.synthetic import generate_synthetic_sequence
from .evaluation import (
    MetricAccumulator,
    evaluate_estimates,
    ground_truth_maps,
    predict_sequence,
    predictions_from_estimate,
)
from .network import ModelConfig, SceneFlowNet, build_model, load_checkpoint, read_checkpoint_header
from .training import fit
from .visualize import disparity_to_rgb, sceneflow_to_rgb

log = logging.getLogger("mmsf")

# stored predictions must stay inside the 16-bit disparity code range
_DISP_CLIP = (1.0 / 256, 255.99)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError("%s\n%s" % (self.format_usage().strip(), message))


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmsf", description="Multi-frame self-supervised monocular scene flow.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("--config", metavar="PATH", help="YAML run configuration")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="write a synthetic dataset with ground truth")
    common(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--num", type=int, help="number of scenes (default: config num_sequences)")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--out", required=True, metavar="DIR", help="checkpoint and log directory")
    p.add_argument("--data", metavar="DIR", help="dataset root (default: synthetic, generated in memory)")
    p.add_argument("--steps", type=int, help="override train.total_steps")
    p.add_argument("--checkpoint", metavar="PATH", help="resume from this checkpoint")
    p.add_argument("--two-frame", action="store_true", help="two-frame baseline without the ConvLSTM")

    p = sub.add_parser("eval", help="outlier rates for a checkpoint or stored predictions")
    common(p)
    p.add_argument("--data", required=True, metavar="DIR", help="dataset root with ground truth")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", metavar="PATH")
    src.add_argument("--predictions", metavar="DIR", help="prediction root in the dataset layout")

    p = sub.add_parser("infer", help="write disparity / flow PNGs, scene flow and color images")
    common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("visualize", help="color images for stored estimates")
    common(p)
    p.add_argument("--predictions", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--max-norm", type=float, help="scene-flow color scale (default: 95th percentile)")
    return parser


def _model_from_checkpoint(path: str) -> SceneFlowNet:
    header = read_checkpoint_header(path)
    cfg = ModelConfig(**header["config"])
    model = SceneFlowNet(cfg)
    load_checkpoint(path, model)
    return model


# -- commands ------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    n = args.num if args.num is not None else cfg.num_sequences
    os.makedirs(args.out, exist_ok=True)
    for k in range(n):
        sample = generate_synthetic_sequence(cfg.synth, args.seed + k)
        write_scene(args.out, "scene_%02d" % k, sample)
    dump_config(cfg, os.path.join(args.out, "config.yaml"))
    log.info("wrote %d scene(s) to %s", n, args.out)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    model_cfg = dataclasses.replace(cfg.model, two_frame_mode=cfg.model.two_frame_mode or args.two_frame)
    train_cfg = cfg.train
    if args.steps is not None:
        # halving points follow the new run length
        train_cfg = dataclasses.replace(train_cfg, total_steps=args.steps, lr_halving_steps=None)
    train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if args.data:
        dataset = load_kitti_dir(args.data, train_cfg.seq_len, with_gt=False)
    else:
        synth = dataclasses.replace(cfg.synth, num_frames=train_cfg.seq_len)
        dataset = [generate_synthetic_sequence(synth, args.seed + k) for k in range(cfg.num_sequences)]
    if not dataset:
        raise RuntimeError("no training sequences found")
    model = build_model(model_cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    dump_config(dataclasses.replace(cfg, model=model_cfg, train=train_cfg), os.path.join(args.out, "config.yaml"))
    handler = logging.FileHandler(os.path.join(args.out, "train.log"))
    logging.getLogger("mmsf").addHandler(handler)
    try:
        fit(model, dataset, train_cfg, cfg.loss, out_dir=args.out, resume=args.checkpoint)
    finally:
        logging.getLogger("mmsf").removeHandler(handler)
        handler.close()
    log.info("final checkpoint %s", os.path.join(args.out, "final.npz"))
    return 0


def _scene_samples(data: str):
    samples = load_kitti_dir(data, seq_len=None)
    if not samples:
        raise RuntimeError("no sequences found under %s" % data)
    return samples


def _scene_name(sample) -> str:
    return sample.name.split("/")[0]


def _first_frame(sample) -> int:
    return int(sample.name.split("/")[1])


def _read_prediction(root: str, scene: str, frame: int):
    fname = "%06d.png" % frame
    paths = [os.path.join(root, scene, k, fname) for k in ("disp", "disp_future", "flow")]
    if not all(os.path.isfile(p) for p in paths):
        return None
    d1, _ = decode_disparity_png16(read_png(paths[0]))
    d2, _ = decode_disparity_png16(read_png(paths[1]))
    flow, _ = decode_flow_png16(read_png(paths[2]))
    as_t = lambda a: torch.from_numpy(a[None] if a.ndim == 2 else a).unsqueeze(0)
    return {"d1": as_t(d1), "d2": as_t(d2), "flow": as_t(flow)}


def cmd_eval(args, cfg: RunConfig) -> int:
    samples = _scene_samples(args.data)
    acc = MetricAccumulator()
    if args.checkpoint:
        model = _model_from_checkpoint(args.checkpoint)
        for sample in samples:
            estimates, frame_ids = predict_sequence(model, sample)
            evaluate_estimates(estimates, sample, frame_ids, acc)
    else:
        for sample in samples:
            scene, first = _scene_name(sample), _first_frame(sample)
            for t in range(len(sample)):
                ref = ground_truth_maps(sample, t)
                pred = _read_prediction(args.predictions, scene, first + t)
                if ref is None or pred is None:
                    continue
                acc.add(pred, *ref)
    report = acc.report()
    if report.undefined:
        raise RuntimeError("no frame had both predictions and ground truth")
    print(report.table())
    return 0


def _write_rgb(path: str, rgb: np.ndarray) -> None:
    if not cv2.imwrite(path, cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise IOError("cannot write %s" % path)


def cmd_infer(args, cfg: RunConfig) -> int:
    model = _model_from_checkpoint(args.checkpoint)
    count = 0
    for sample in _scene_samples(args.data):
        scene, first = _scene_name(sample), _first_frame(sample)
        root = os.path.join(args.out, scene)
        for sub in ("disp", "disp_future", "flow", "sceneflow", "vis"):
            os.makedirs(os.path.join(root, sub), exist_ok=True)
        estimates, frame_ids = predict_sequence(model, sample)
        for est, t in zip(estimates, frame_ids):
            if est.s_f is None:
                continue
            fname = "%06d" % (first + t)
            pred = predictions_from_estimate(est, sample.rig)
            for key, folder in (("d1", "disp"), ("d2", "disp_future")):
                d = pred[key][0, 0].numpy().clip(*_DISP_CLIP)
                write_png(os.path.join(root, folder, fname + ".png"), encode_disparity_png16(d))
            flow = pred["flow"][0].numpy().clip(-511.9, 511.9)
            write_png(os.path.join(root, "flow", fname + ".png"), encode_flow_png16(flow))
            sf = est.s_f[0].double().numpy()
            np.save(os.path.join(root, "sceneflow", fname + ".npy"), sf)
            _write_rgb(os.path.join(root, "vis", fname + "_sceneflow.png"), sceneflow_to_rgb(sf))
            _write_rgb(os.path.join(root, "vis", fname + "_disp.png"), disparity_to_rgb(pred["d1"]))
            count += 1
    log.info("wrote predictions for %d frame(s) to %s", count, args.out)
    return 0


def cmd_visualize(args, cfg: RunConfig) -> int:
    count = 0
    for path in sorted(glob.glob(os.path.join(args.predictions, "*", "sceneflow", "*.npy"))):
        scene_dir = os.path.dirname(os.path.dirname(path))
        scene = os.path.basename(scene_dir)
        stem = os.path.splitext(os.path.basename(path))[0]
        out = os.path.join(args.out, scene)
        os.makedirs(out, exist_ok=True)
        _write_rgb(os.path.join(out, stem + "_sceneflow.png"), sceneflow_to_rgb(np.load(path), args.max_norm))
        disp_png = os.path.join(scene_dir, "disp", stem + ".png")
        if os.path.isfile(disp_png):
            d, _ = decode_disparity_png16(read_png(disp_png))
            _write_rgb(os.path.join(out, stem + "_disp.png"), disparity_to_rgb(d))
        count += 1
    if count == 0:
        raise RuntimeError("no stored scene flow (*/sceneflow/*.npy) under %s" % args.predictions)
    log.info("wrote %d visualization(s) to %s", count, args.out)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "visualize": cmd_visualize,
}


def _setup_logging():
    level = os.environ.get("MMSF_LOG_LEVEL", "INFO").upper()
    logger = logging.getLogger("mmsf")
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)
    logger.setLevel(getattr(logging, level, logging.INFO))


def run(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:
        # --help
        return 0 if not exc.code else 1
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError, TypeError, yaml.YAMLError) as exc:
        print("invalid configuration: %s" % exc, file=sys.stderr)
        return 1
    try:
        torch.manual_seed(args.seed)
        return COMMANDS[args.command](args, cfg)
    except Exception as exc:
        log.error("%s failed: %s", args.command, exc)
        log.debug("traceback", exc_info=True)
        return 2


def main():
    sys.exit(run())
