import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from mmsf.core import Intrinsics, StereoRig  # noqa: E402
from mmsf.data.synthetic import SynthConfig, generate_synthetic_sequence  # noqa: E402
from mmsf.network import ModelConfig, build_model  # noqa: E402


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def unit_rig():
    return StereoRig(Intrinsics(1.0, 1.0, 0.0, 0.0), 1.0)


@pytest.fixture
def rig():
    return StereoRig(Intrinsics(100.0, 100.0, 31.5, 15.5), 0.5)


@pytest.fixture(scope="session")
def small_sequence():
    """5 frames at 32x64; pair with a model of at most 5 levels."""
    cfg = SynthConfig(height=32, width=64, fx=50.0, fy=50.0)
    return generate_synthetic_sequence(cfg, seed=3)


@pytest.fixture(scope="session")
def sequence():
    return generate_synthetic_sequence(seed=0)


@pytest.fixture
def tiny_model():
    return build_model(ModelConfig(num_levels=4, width_multiplier=0.125), seed=0)
