import os

import numpy as np
import pytest

from core.denoiser import DenoiserConfig
from core.range_codec import PointCloud, SensorConfig

SLOW_ENV = "EQDIFF_RUN_SLOW"


def pytest_collection_modifyitems(config, items):
    if os.environ.get(SLOW_ENV) == "1":
        return
    skip_slow = pytest.mark.skip(reason=f"slow run; set {SLOW_ENV}=1 to enable")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_sensor():
    return SensorConfig.preset("kitti64", height=8, width=32)


@pytest.fixture
def toy_config():
    return DenoiserConfig(
        levels=2,
        channels=8,
        heads=4,
        ffn_expansion=2,
        windows=((2, 8), (2, 8)),
        overlaps=((1, 4), (1, 4)),
        fourier_freqs=2,
        text_dim=16,
        text_tokens=2,
    )


def random_cloud(rng, count=2000, sensor=None):
    """Points spread over the sensor's field of view at 2-60 m."""
    sensor = sensor or SensorConfig()
    elevation = rng.uniform(sensor.fov_down_rad + 1e-3, sensor.fov_up_rad - 1e-3, count)
    azimuth = rng.uniform(-np.pi, np.pi, count)
    r = rng.uniform(2.0, 60.0, count)
    xyz = np.stack(
        [r * np.cos(elevation) * np.cos(azimuth), r * np.cos(elevation) * np.sin(azimuth), r * np.sin(elevation)],
        axis=1,
    )
    return PointCloud(np.concatenate([xyz, rng.uniform(0.0, 1.0, (count, 1))], axis=1))


@pytest.fixture
def cloud(rng):
    return random_cloud(rng)
