"""Pyramid scene-flow network with a shared bidirectional split decoder and a
forward-warped ConvLSTM carried across time steps."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as tf

from .core import EstimateBundle, LSTMState, SequenceSample, StereoRig, rescale_to_level
from .geometry import SplatConfig, backward_warp, reproject_with_sceneflow, softmax_splat

LEAKY_SLOPE = 0.1
# float32 sigmoid underflows to 0 near -104; keep disparities strictly positive
SIGMOID_FLOOR = 1e-6


@dataclass
class ModelConfig:
    num_levels: int = 6
    correlation_radius: int = 4
    width_multiplier: float = 0.25
    # full-width PWC-Net channels, finest -> coarsest
    encoder_channels: Tuple[int, ...] = (16, 32, 64, 96, 128, 196)
    decoder_channels: Tuple[int, ...] = (128, 128, 96, 64)
    head_channels: int = 32
    lstm_channels: int = 64
    split_at: int = 2
    two_frame_mode: bool = False
    disparity_scale: float = 0.3
    # initial disparity as a fraction of the level width (sets the head's output bias)
    disparity_init: float = 0.01
    splat_alpha: float = 10.0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.decoder_channels = tuple(self.decoder_channels)
        if self.num_levels < 2:
            raise ValueError("num_levels must be >= 2")
        if self.correlation_radius < 1:
            raise ValueError("correlation_radius must be >= 1")
        if self.split_at != 2:
            raise ValueError("only the split at the 2nd-to-last layer is supported")
        if not 0 < self.disparity_init < self.disparity_scale:
            raise ValueError("disparity_init must lie in (0, disparity_scale)")
        if len(self.encoder_channels) < self.num_levels:
            raise ValueError("need encoder channels for every level")

    def width(self, c: int) -> int:
        return max(2, int(round(c * self.width_multiplier)))

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def min_frames(self) -> int:
        return 2 if self.two_frame_mode else 3


def conv(c_in, c_out, stride=1, dilation=1, act=True):
    layer = nn.Conv2d(c_in, c_out, 3, stride, padding=dilation, dilation=dilation)
    if act:
        return nn.Sequential(layer, nn.LeakyReLU(LEAKY_SLOPE))
    return layer


class FeaturePyramid(nn.Module):
    def __init__(self, channels: Sequence[int]):
        super().__init__()
        self.levels = nn.ModuleList()
        c_in = 3
        for c in channels:
            self.levels.append(nn.Sequential(conv(c_in, c, stride=2), conv(c, c)))
            c_in = c

    def forward(self, img):
        feats = []
        x = img
        for level in self.levels:
            x = level(x)
            feats.append(x)
        return feats[::-1]


def normalize_features(f: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return f / torch.linalg.vector_norm(f, dim=1, keepdim=True).clamp(min=eps)


def correlation_volume(f1: torch.Tensor, f2: torch.Tensor, radius: int) -> torch.Tensor:
    """Channel (oy + r) * (2r + 1) + (ox + r) holds <f1(p), f2(p + o)> / C."""
    if f1.shape != f2.shape:
        raise ValueError("feature shapes differ: %s vs %s" % (tuple(f1.shape), tuple(f2.shape)))
    b, c, h, w = f1.shape
    k = 2 * radius + 1
    win = tf.unfold(tf.pad(f2, (radius,) * 4), k).view(b, c, k * k, h, w)
    return (win * f1.unsqueeze(2)).sum(1) / c


class ConvLSTMCell(nn.Module):
    """ConvLSTM with leaky ReLU in place of tanh."""

    def __init__(self, in_ch: int, hidden_ch: int):
        super().__init__()
        self.hidden_ch = hidden_ch
        self.gates = nn.Conv2d(in_ch + hidden_ch, 4 * hidden_ch, 3, padding=1)
        nn.init.zeros_(self.gates.bias)

    def forward(self, x, state: Optional[LSTMState] = None):
        if state is None:
            b, _, h, w = x.shape
            state = LSTMState.zeros((b, self.hidden_ch, h, w), x)
        if state.h.shape[1] != self.hidden_ch or x.shape[1] + self.hidden_ch != self.gates.in_channels:
            raise ValueError("channel mismatch in ConvLSTM")
        i, f, o, g = self.gates(torch.cat((x, state.h), 1)).chunk(4, 1)
        c = torch.sigmoid(f) * state.c + torch.sigmoid(i) * tf.leaky_relu(g, LEAKY_SLOPE)
        h = torch.sigmoid(o) * tf.leaky_relu(c, LEAKY_SLOPE)
        return h, LSTMState(h, c)


def convlstm_step(cell: ConvLSTMCell, x, state: Optional[LSTMState]):
    return cell(x, state)


class SplitDecoder(nn.Module):
    """Shared trunk, optional ConvLSTM, then separate 2-layer scene-flow and disparity heads."""

    def __init__(self, in_ch: int, trunk: Sequence[int], head: int, lstm_ch: Optional[int]):
        super().__init__()
        layers, c = [], in_ch
        for co in trunk:
            layers.append(conv(c, co))
            c = co
        self.trunk = nn.Sequential(*layers)
        self.lstm = ConvLSTMCell(c, lstm_ch) if lstm_ch else None
        c = lstm_ch or c
        self.out_channels = c
        self.sf_head = nn.Sequential(conv(c, head), conv(head, 3, act=False))
        self.disp_head = nn.Sequential(conv(c, head), conv(head, 1, act=False))

    def forward(self, x, state: Optional[LSTMState] = None):
        x = self.trunk(x)
        if self.lstm is not None:
            x, state = self.lstm(x, state)
        return self.sf_head(x), self.disp_head(x), x, state


class JointDecoder(nn.Module):
    """Single joint decoder of the two-frame predecessor; parameter-count reference only."""

    def __init__(self, in_ch: int, trunk: Sequence[int], head: int):
        super().__init__()
        layers, c = [], in_ch
        for co in list(trunk) + [head]:
            layers.append(conv(c, co))
            c = co
        self.trunk = nn.Sequential(*layers)
        self.sf_out = conv(head, 3, act=False)
        self.disp_out = conv(head, 1, act=False)


class ContextNetwork(nn.Module):
    """Dilated post-processing network of the predecessor; parameter-count reference only."""

    def __init__(self, in_ch: int, cfg: ModelConfig):
        super().__init__()
        widths = [cfg.width(c) for c in (128, 128, 128, 96, 64, 32)]
        layers, c = [], in_ch
        for co, dil in zip(widths, (1, 2, 4, 8, 16, 1)):
            layers.append(conv(c, co, dilation=dil))
            c = co
        self.body = nn.Sequential(*layers)
        self.sf_out = conv(c, 3, act=False)
        self.disp_out = conv(c, 1, act=False)


def warp_lstm_state(state: LSTMState, s_prev, d_prev, feat_prev, feat_cur, rig: StereoRig, mask_conv: nn.Module,
                    splat: SplatConfig = SplatConfig()) -> LSTMState:
    """Forward-warp the previous state along the previous forward scene flow and
    zero it where warped and current features disagree.

    The state may stack several decoder branches along the batch axis; the
    warp is shared by all of them.
    """
    if s_prev.shape[-2:] != state.h.shape[-2:] or feat_prev.shape != feat_cur.shape:
        raise ValueError("state, estimates and features must share the level resolution")
    reps = state.h.shape[0] // s_prev.shape[0]
    flow, _ = reproject_with_sceneflow(d_prev, s_prev, rig)
    h = softmax_splat(state.h, flow.repeat(reps, 1, 1, 1), d_prev.repeat(reps, 1, 1, 1), splat)
    c = softmax_splat(state.c, flow.repeat(reps, 1, 1, 1), d_prev.repeat(reps, 1, 1, 1), splat)
    with torch.no_grad():
        warped = softmax_splat(normalize_features(feat_prev), flow, d_prev, splat)
        affinity = (warped * normalize_features(feat_cur)).sum(1, keepdim=True)
        mask = (mask_conv(affinity) > 0.5).to(h.dtype).repeat(reps, 1, 1, 1)
    return LSTMState(h * mask, c * mask)


@dataclass
class Carry:
    """State handed from time step t-1 to t."""

    states: List[LSTMState]
    s_f: torch.Tensor
    d: torch.Tensor


@dataclass
class LevelOutput:
    s_f: Optional[torch.Tensor]
    s_b: Optional[torch.Tensor]
    d_f: torch.Tensor
    d_b: torch.Tensor
    state: Optional[LSTMState] = None

    def bundle(self) -> EstimateBundle:
        return EstimateBundle(self.s_f, self.s_b, self.d_f, self.d_b)


class SceneFlowNet(nn.Module):
    def __init__(self, cfg: ModelConfig = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        enc = [cfg.width(c) for c in cfg.encoder_channels[: cfg.num_levels]]
        self.encoder = FeaturePyramid(enc)
        # decode coarse -> fine, stopping one level above the finest (PWC-Net convention)
        self.level_channels = enc[::-1][: cfg.num_levels - 1]
        trunk = [cfg.width(c) for c in cfg.decoder_channels]
        head = cfg.width(cfg.head_channels)
        n_cv = (2 * cfg.correlation_radius + 1) ** 2
        lstm_ch = None if cfg.two_frame_mode else cfg.width(cfg.lstm_channels)
        self.up_channels = lstm_ch or trunk[-1]
        n_cv_in = n_cv if cfg.two_frame_mode else 2 * n_cv
        self.decoders = nn.ModuleList()
        self.mask_convs = nn.ModuleList()
        for c in self.level_channels:
            in_ch = n_cv_in + c + 3 + 1 + self.up_channels
            dec = SplitDecoder(in_ch, trunk, head, lstm_ch)
            p = cfg.disparity_init / cfg.disparity_scale
            nn.init.constant_(dec.disp_head[-1].bias, math.log(p / (1 - p)))
            self.decoders.append(dec)
            mc = nn.Conv2d(1, 1, 1)
            nn.init.ones_(mc.weight)
            nn.init.zeros_(mc.bias)
            self.mask_convs.append(mc)
        self.splat = SplatConfig("softmax", cfg.splat_alpha)

    def decoder_parameters(self):
        return [p for d in self.decoders for p in d.parameters()]

    def disparity_head_parameters(self):
        return [p for d in self.decoders for p in d.disp_head.parameters()]

    def encode_pyramid(self, img):
        h, w = img.shape[-2:]
        m = 2 ** self.cfg.num_levels
        if h % m or w % m:
            raise ValueError("input %dx%d not divisible by %d" % (h, w, m))
        return self.encoder(img)

    def _cost(self, f_cur, f_tgt, up_sf, up_d, rig_l):
        if up_sf is not None:
            flow, _ = reproject_with_sceneflow(up_d, up_sf, rig_l)
            f_tgt, _ = backward_warp(f_tgt, flow)
        cv = correlation_volume(normalize_features(f_cur), normalize_features(f_tgt), self.cfg.correlation_radius)
        return tf.leaky_relu(cv, LEAKY_SLOPE)

    def decode_level(self, li, cv_own, cv_other, feat, up_prev, state):
        """One decoder pass; ``cv_other`` is None in two-frame mode.

        ``up_prev`` = (scene flow, width-normalized disparity, features) from
        the previous level, zeros at the coarsest level.
        """
        parts = [cv_own] if cv_other is None else [cv_own, cv_other]
        x = torch.cat(parts + [feat] + list(up_prev), 1)
        return self.decoders[li](x, state)

    def _time_step(self, feats, t, rig, full_hw, carry: Optional[Carry], detach_disparity: bool):
        cfg = self.cfg
        multi = not cfg.two_frame_mode
        n = len(feats)
        if multi:
            targets = [t + 1, t - 1]
        else:
            targets = [k for k in (t + 1, t - 1) if 0 <= k < n]
        nb = len(targets)
        B = feats[t][0].shape[0]
        H, W = full_hw
        up_sf = up_d = up_x = None
        levels, states = [], []
        for li in range(len(self.decoders)):
            f_cur = feats[t][li]
            h, w = f_cur.shape[-2:]
            rig_l = rig.at_resolution(h, w, H, W)
            cvs = []
            for k, tgt in enumerate(targets):
                sl = slice(k * B, (k + 1) * B)
                cvs.append(self._cost(
                    f_cur, feats[tgt][li],
                    None if up_sf is None else up_sf[sl], None if up_d is None else up_d[sl], rig_l,
                ))
            if up_sf is None:
                up_sf = f_cur.new_zeros(nb * B, 3, h, w)
                up_dn = f_cur.new_zeros(nb * B, 1, h, w)
                up_x = f_cur.new_zeros(nb * B, self.up_channels, h, w)
            else:
                up_dn = up_d / w
            if multi:
                cv_own = torch.cat(cvs, 0)
                cv_other = torch.cat(cvs[::-1], 0)
            else:
                cv_own, cv_other = torch.cat(cvs, 0), None

            state = None
            if multi:
                if carry is not None:
                    s_prev = rescale_to_level(carry.s_f, h, w, "sceneflow")
                    d_prev = rescale_to_level(carry.d, h, w, "disparity")
                    state = warp_lstm_state(carry.states[li], s_prev, d_prev, feats[t - 1][li], f_cur, rig_l,
                                            self.mask_convs[li], self.splat)
                else:
                    state = LSTMState.zeros((nb * B, self.up_channels, h, w), f_cur)

            sf_res, d_raw, x, state = self.decode_level(
                li, cv_own, cv_other, f_cur.repeat(nb, 1, 1, 1), (up_sf, up_dn, up_x), state)
            sf = up_sf + sf_res
            d = torch.sigmoid(d_raw).clamp(min=SIGMOID_FLOOR) * (cfg.disparity_scale * w)
            states.append(state)
            levels.append(self._level_output(sf, d, targets, t, B, state))

            if li + 1 < len(self.decoders):
                h2, w2 = feats[t][li + 1].shape[-2:]
                up_sf = rescale_to_level(sf, h2, w2, "sceneflow")
                up_d = rescale_to_level(d.detach() if detach_disparity else d, h2, w2, "disparity")
                up_x = rescale_to_level(x, h2, w2, "feature")
        return levels, states

    @staticmethod
    def _level_output(sf, d, targets, t, B, state):
        parts = {("f" if tgt > t else "b"): k for k, tgt in enumerate(targets)}
        get = lambda x, k: x[k * B:(k + 1) * B]
        s_f = get(sf, parts["f"]) if "f" in parts else None
        s_b = get(sf, parts["b"]) if "b" in parts else None
        d_f = get(d, parts["f"]) if "f" in parts else get(d, parts["b"])
        d_b = get(d, parts["b"]) if "b" in parts else d_f
        return LevelOutput(s_f, s_b, d_f, d_b, state)

    def run(self, frames: Sequence[torch.Tensor], rig: StereoRig, carry: Optional[Carry] = None,
            detach_disparity: bool = False):
        """Returns (estimates at input resolution, carry, per-level estimates).

        Multi-frame mode yields one estimate per interior frame; two-frame mode
        one per frame. Per-level lists are indexed [level][time], coarse first,
        and stay at each level's decoding resolution.
        """
        cfg = self.cfg
        if len(frames) < cfg.min_frames:
            raise ValueError("need at least %d frames, got %d" % (cfg.min_frames, len(frames)))
        H, W = frames[0].shape[-2:]
        feats = [self.encode_pyramid(f)[: len(self.decoders)] for f in frames]
        times = range(1, len(frames) - 1) if not cfg.two_frame_mode else range(len(frames))
        estimates = []
        per_level = [[] for _ in self.decoders]
        for t in times:
            levels, states = self._time_step(feats, t, rig, (H, W), carry, detach_disparity)
            for li, lo in enumerate(levels):
                per_level[li].append(lo.bundle())
            final = per_level[-1][-1].rescaled(H, W)
            estimates.append(final)
            if not cfg.two_frame_mode:
                d = final.d.detach() if detach_disparity else final.d
                carry = Carry(states, final.s_f, d)
        return estimates, carry, per_level

    def forward(self, frames, rig, carry=None, detach_disparity=False):
        estimates, carry, _ = self.run(frames, rig, carry, detach_disparity)
        return estimates, carry


def model_forward(model: SceneFlowNet, sample: SequenceSample, carry: Optional[Carry] = None,
                  detach_disparity: bool = False):
    return model(sample.left_frames, sample.rig, carry, detach_disparity)


def count_parameters(params) -> int:
    return sum(p.numel() for p in params)


def joint_reference_parameter_count(cfg: ModelConfig) -> int:
    """Decoder parameters of the joint-decoder predecessor (with context network)
    built with the same trunk widths and decoder inputs as ``cfg``."""
    ref = SceneFlowNet(cfg)
    trunk = [cfg.width(c) for c in cfg.decoder_channels]
    head = cfg.width(cfg.head_channels)
    total = 0
    for dec in ref.decoders:
        in_ch = dec.trunk[0][0].in_channels
        total += count_parameters(JointDecoder(in_ch, trunk, head).parameters())
    total += count_parameters(ContextNetwork(head + 4, cfg).parameters())
    return total


# ---- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: SceneFlowNet, optimizer: Optional[torch.optim.Optimizer] = None,
                    meta: Optional[dict] = None):
    """Write parameters (and optionally Adam moments) to one .npz archive."""
    arrays = {"model/" + k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        sd = optimizer.state_dict()
        for idx, st in sd["state"].items():
            for key, val in st.items():
                arrays["optim/%d/%s" % (idx, key)] = np.asarray(val.cpu().numpy() if torch.is_tensor(val) else val)
    header = {
        "fingerprint": model.cfg.fingerprint(),
        "config": asdict(model.cfg),
        "meta": meta or {},
    }
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint_header(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["__header__"]).decode())


def load_checkpoint(path, model: SceneFlowNet, optimizer: Optional[torch.optim.Optimizer] = None) -> dict:
    """Restore into ``model`` (and ``optimizer``); returns the stored meta dict.

    Raises ValueError on a config fingerprint or parameter shape mismatch.
    """
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header["fingerprint"] != model.cfg.fingerprint():
            raise ValueError("checkpoint config fingerprint %s does not match model %s"
                             % (header["fingerprint"], model.cfg.fingerprint()))
        own = model.state_dict()
        state = {}
        for k, v in own.items():
            key = "model/" + k
            if key not in z:
                raise ValueError("checkpoint lacks parameter %s" % k)
            arr = z[key]
            if tuple(arr.shape) != tuple(v.shape):
                raise ValueError("shape mismatch for %s: %s vs %s" % (k, arr.shape, tuple(v.shape)))
            state[k] = torch.from_numpy(arr.copy()).to(v.dtype)
        model.load_state_dict(state)
        if optimizer is not None:
            sd = optimizer.state_dict()
            restored = {}
            for name in z.files:
                if not name.startswith("optim/"):
                    continue
                _, idx, key = name.split("/")
                arr = z[name]
                restored.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr))
            sd["state"] = restored
            optimizer.load_state_dict(sd)
    return header.get("meta", {})


def build_model(cfg: ModelConfig = None, seed: Optional[int] = None) -> SceneFlowNet:
    if seed is not None:
        torch.manual_seed(seed)
    return SceneFlowNet(cfg or ModelConfig())
