"""Shared fixtures: seeded generators, a micro network configuration and tiny synthetic frames."""

from __future__ import annotations

import numpy as np
import pytest

from pyfu.data import SensorConfig
from pyfu.dataio import SyntheticSceneSpec, gen_synthetic
from pyfu.network import PyFuConfig
from pyfu.traineval import build_sample

MICRO = 4


@pytest.fixture
def rng():
    """Seeded generator; every test gets a fresh one."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_sensor():
    """8x64 range view: the smallest raster the lidar backbone accepts, twice over in width."""
    return SensorConfig(height=8, width=64)


@pytest.fixture
def tiny_spec(tiny_sensor):
    """Two frames with a 32x64 camera."""
    return SyntheticSceneSpec(seed=3, frames=2, sensor=tiny_sensor, image_size=(32, 64), focal=32.0)


@pytest.fixture
def tiny_frames(tiny_spec):
    return gen_synthetic(tiny_spec)


@pytest.fixture
def tiny_samples(tiny_frames, tiny_sensor):
    return [build_sample(bundle, tiny_sensor) for bundle in tiny_frames]


@pytest.fixture
def micro_config():
    """Four-channel network with every backbone trainable."""
    return PyFuConfig(
        num_classes=6,
        channels=MICRO,
        lidar_stem=MICRO,
        lidar_widths=(MICRO,) * 6,
        camera_stem=MICRO,
        camera_widths=(MICRO,) * 4,
        expansion=2,
        bottleneck_ratio=2,
        dpc_dilations=((1, 1), (1, 2)),
        freeze_lidar=False,
        freeze_camera=False,
    )
