"""YAML run configuration with one section per config dataclass.

Example::

    model: {width_multiplier: 0.25, two_frame_mode: false}
    train: {total_steps: 2000, augment: false}
    loss: {lambda_sf_sm: 1000}
    synth: {num_frames: 5, num_objects: 2}
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional

import yaml

from .data.synthetic import RectObject, SynthConfig
from .losses import LossWeights
from .network import ModelConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    synth: SynthConfig = field(default_factory=SynthConfig)
    num_sequences: int = 4

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))


def _plain(x):
    # safe_dump has no tuple representer
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, section: Optional[dict], where: str):
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ValueError("unknown key(s) in [%s]: %s" % (where, ", ".join(unknown)))
    if cls is SynthConfig and section.get("objects") is not None:
        section["objects"] = [RectObject(**o) for o in section["objects"]]
    for name, value in section.items():
        if isinstance(value, list) and name != "objects":
            section[name] = tuple(value)
    return cls(**section)


def config_from_dict(raw: Optional[dict]) -> RunConfig:
    raw = dict(raw or {})
    sections = {"model": ModelConfig, "train": TrainConfig, "loss": LossWeights, "synth": SynthConfig}
    unknown = sorted(set(raw) - set(sections) - {"num_sequences"})
    if unknown:
        raise ValueError("unknown config section(s): %s" % ", ".join(unknown))
    built = {k: _build(cls, raw.get(k), k) for k, cls in sections.items()}
    return RunConfig(num_sequences=int(raw.get("num_sequences", 4)), **built)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is not None and not isinstance(raw, dict):
        raise ValueError("%s: top level must be a mapping" % path)
    return config_from_dict(raw)


def dump_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
