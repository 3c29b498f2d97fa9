import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from core.config import (  # noqa: E402
    AsppConfig,
    BackboneConfig,
    GatedFpnConfig,
    HeadConfig,
    ModelSection,
    SynthSection,
)
from data.annotations import AnnotatedImage, Instance  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model_cfg():
    """A narrow network at 64x64 so forward/backward stays fast in tests."""
    return ModelSection(
        input_size=(64, 64),
        backbone=BackboneConfig(
            stem_channels=4,
            channel_schedule=[4, 8, 8, 16, 16],
            blocks_per_stage=[1, 1, 2, 2, 2],
            residual_width_ratio=0.5,
        ),
        fpn=GatedFpnConfig(fpn_channels=8),
        aspp=AsppConfig(branch_channels=4),
        heads=HeadConfig(head_channels=8, mask_decoder_channels=[8, 8, 4, 4, 4]),
        anchors=[(8, 8), (12, 12), (16, 16), (24, 24), (32, 32), (48, 48)],
        seed=3,
    )


@pytest.fixture
def small_synth_cfg():
    return SynthSection(
        image_size=(64, 64),
        fruit_count=(2, 3),
        branch_count=(1, 2),
        fruit_radius=(6, 12),
        branch_width=(2, 4),
    )


def rect_image(size, boxes, name="sample", branch_rows=None):
    """An image whose instances fill their (x, y, w, h) boxes exactly."""
    height, width = size
    instances = []
    for x, y, w, h in boxes:
        mask = np.zeros((height, width), np.uint8)
        mask[y : y + h, x : x + w] = 1
        instances.append(Instance(box=(x, y, w, h), mask=mask))
    branch = np.zeros((height, width), np.uint8)
    if branch_rows is not None:
        branch[branch_rows[0] : branch_rows[1]] = 1
    rgb = np.full((height, width, 3), 90, np.uint8)
    return AnnotatedImage(name=name, rgb=rgb, branch_mask=branch, instances=instances)


@pytest.fixture
def make_image():
    return rect_image
