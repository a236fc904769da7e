import numpy as np
import pytest

import netspec
from data_io import SynthConfig
from layer_registry import HeadSpec, LabelMode
from utils.constants import IMAGE_HEAD, VIDEO_HEAD

# Narrow layers keep every test network to a few thousand parameters
TINY_WIDTHS = {"fc1_width": 16, "fc2_width": 8, "width_multiplier": 0.125}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def build_tiny():
    def build(depth=2, resolution=32, heads=None, **overrides):
        heads = heads or [HeadSpec(VIDEO_HEAD, 4)]
        return netspec.build_architecture(depth, resolution, heads, **{**TINY_WIDTHS, **overrides})
    return build


@pytest.fixture
def tiny_spec(build_tiny):
    return build_tiny()


@pytest.fixture
def two_head_spec(build_tiny):
    return build_tiny(heads=[HeadSpec(VIDEO_HEAD, 4), HeadSpec(IMAGE_HEAD, 3)])


@pytest.fixture
def multi_label_spec(build_tiny):
    return build_tiny(heads=[HeadSpec(VIDEO_HEAD, 4, LabelMode.MULTI)])


@pytest.fixture
def small_synth():
    return SynthConfig(seed=3, class_count=4, image_domain_size=16, video_count=8, frames_per_video=4, resolution=32)
