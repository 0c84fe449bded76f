import logging

import numpy as np
import pytest
from PIL import Image

from core.errors import ConfigError, DataError, DimensionError
from core.range_codec import (
    RAY_DROP,
    PointCloud,
    RangeImage,
    SensorConfig,
    bev_rasterize,
    decode_depth,
    encode_depth,
    export_depth_png,
    load_range_image,
    make_mask,
    project,
    read_scan_bin,
    save_range_image,
    unproject,
    write_scan_bin,
)
from tests.conftest import random_cloud


def test_presets_and_overrides():
    cfg = SensorConfig.preset("nuscenes32")
    assert (cfg.height, cfg.width, cfg.fov_up, cfg.fov_down, cfg.max_range) == (32, 1024, 10.0, -30.0, 70.0)
    small = SensorConfig.preset("kitti64", height=16)
    assert small.height == 16 and small.fov_down == -25.0
    with pytest.raises(ConfigError):
        SensorConfig.preset("velodyne128")
    with pytest.raises(ConfigError):
        SensorConfig(fov_up=-30.0, fov_down=-25.0)
    with pytest.raises(ConfigError):
        SensorConfig(height=7)


def test_depth_codec_endpoints_and_inverse():
    cfg = SensorConfig()
    assert encode_depth(cfg.min_range, cfg) == pytest.approx(-1.0, abs=1e-15)
    assert encode_depth(cfg.max_range, cfg) == pytest.approx(1.0, abs=1e-15)
    r = np.linspace(cfg.min_range, cfg.max_range, 50)
    np.testing.assert_allclose(decode_depth(encode_depth(r, cfg), cfg), r, rtol=1e-12)
    assert decode_depth(RAY_DROP, cfg) == 0.0
    with pytest.raises(DataError):
        encode_depth(100.0, cfg)


def test_point_cloud_validation():
    with pytest.raises(DimensionError):
        PointCloud(np.zeros((4, 3)))
    with pytest.raises(DataError):
        PointCloud(np.array([[0.0, 0.0, 0.0, 0.5]]))
    with pytest.raises(DataError):
        PointCloud(np.array([[np.nan, 1.0, 0.0, 0.5]]))
    assert PointCloud(np.array([[1.0, 0.0, 0.0, 1.7]])).intensity[0] == 1.0
    assert len(PointCloud()) == 0


def test_projection_is_idempotent(cloud):
    cfg = SensorConfig()
    first = project(cloud, cfg)
    assert first.valid.any()
    second = project(unproject(first), cfg)
    assert np.array_equal(first.valid, second.valid)
    np.testing.assert_allclose(second.depth, first.depth, atol=1e-12)
    np.testing.assert_allclose(second.intensity, first.intensity, atol=1e-12)


def test_points_at_min_range_survive_the_round_trip(rng):
    cfg = SensorConfig()
    elevation = rng.uniform(cfg.fov_down_rad + 1e-3, cfg.fov_up_rad - 1e-3, 500)
    azimuth = rng.uniform(-np.pi, np.pi, 500)
    direction = np.stack(
        [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)], axis=1
    )
    xyz = cfg.min_range * direction / np.linalg.norm(direction, axis=1, keepdims=True)
    image = project(PointCloud(np.concatenate([xyz, np.full((500, 1), 0.5)], axis=1)), cfg)
    assert image.valid.any()
    assert np.all(image.depth[image.valid] > RAY_DROP)
    ranges = unproject(image).ranges
    assert len(ranges) == image.valid.sum()
    assert ranges.min() >= cfg.min_range - 1e-12 and ranges.max() <= cfg.max_range


def test_ring_fills_one_row():
    cfg = SensorConfig()
    _, azimuth = cfg.bin_center_angles()
    ring = np.stack([10.0 * np.cos(azimuth), 10.0 * np.sin(azimuth), np.zeros(1024), np.full(1024, 0.3)], axis=1)
    image = project(PointCloud(ring), cfg)
    assert image.valid.sum() == 1024
    rows = np.nonzero(image.valid.any(axis=1))[0]
    assert len(rows) == 1 and image.valid[rows[0]].all()


def test_rotating_by_one_bin_shifts_one_column(rng):
    cfg = SensorConfig(height=16, width=64)
    elevation, azimuth = cfg.bin_center_angles()
    el = elevation[rng.integers(0, cfg.height, cfg.width)]
    r = rng.uniform(2.0, 60.0, cfg.width)
    xyz = np.stack([r * np.cos(el) * np.cos(azimuth), r * np.cos(el) * np.sin(azimuth), r * np.sin(el)], axis=1)
    cloud = PointCloud(np.concatenate([xyz, rng.uniform(0, 1, (cfg.width, 1))], axis=1))
    step = 2.0 * np.pi / cfg.width
    turn = np.array([[np.cos(step), -np.sin(step), 0.0], [np.sin(step), np.cos(step), 0.0], [0.0, 0.0, 1.0]])
    rotated = PointCloud(np.concatenate([cloud.xyz @ turn.T, cloud.intensity[:, None]], axis=1))
    before, after = project(cloud, cfg), project(rotated, cfg)
    # azimuth grows toward column 0
    assert np.array_equal(after.valid, np.roll(before.valid, -1, axis=1))
    np.testing.assert_allclose(after.depth, np.roll(before.depth, -1, axis=1), atol=1e-12)


def test_unprojected_points_stay_within_half_a_bin(rng):
    cfg = SensorConfig()
    half_el = np.radians(cfg.fov_up - cfg.fov_down) / cfg.height / 2
    half_az = np.pi / cfg.width
    for point in random_cloud(rng, count=50).points:
        back = unproject(project(PointCloud(point[None]), cfg)).xyz[0]
        el = np.arcsin(np.array([point[2], back[2]]) / np.linalg.norm([point[:3], back], axis=1))
        az = np.arctan2([point[1], back[1]], [point[0], back[0]])
        assert abs(el[1] - el[0]) <= half_el + 1e-9
        assert abs(np.angle(np.exp(1j * (az[1] - az[0])))) <= half_az + 1e-9


def test_nearest_point_wins_a_pixel():
    cfg = SensorConfig()
    direction = np.array([1.0, 0.2, -0.05])
    direction /= np.linalg.norm(direction)
    points = np.array([[*(direction * 10.0), 0.2], [*(direction * 5.0), 0.9], [*(direction * 20.0), 0.4]])
    image = project(PointCloud(points), cfg)
    assert image.valid.sum() == 1
    assert image.depth[image.valid][0] == pytest.approx(encode_depth(5.0, cfg))
    assert image.intensity[image.valid][0] == pytest.approx(0.8)


def test_points_outside_range_or_field_of_view_are_dropped():
    cfg = SensorConfig()
    points = np.array(
        [
            [0.3, 0.0, 0.0, 0.5],  # closer than min_range
            [90.0, 0.0, 0.0, 0.5],  # beyond max_range
            [0.0, 0.0, 10.0, 0.5],  # straight up
        ]
    )
    image = project(PointCloud(points), cfg)
    assert not image.valid.any()
    assert np.all(image.depth == RAY_DROP) and np.all(image.intensity == RAY_DROP)


def test_azimuth_layout():
    cfg = SensorConfig(height=4, width=8, fov_up=10.0, fov_down=-10.0)
    behind = project(PointCloud(np.array([[-10.0, 0.01, 0.0, 0.5]])), cfg)
    ahead = project(PointCloud(np.array([[10.0, -0.01, 0.0, 0.5]])), cfg)
    # azimuth +pi sits in the first column, straight ahead in the centre
    assert behind.valid[:, 0].any()
    assert ahead.valid[:, cfg.width // 2].any()


def test_range_image_rejects_broken_ray_drop_code():
    cfg = SensorConfig(height=2, width=4)
    depth = np.full((2, 4), RAY_DROP)
    valid = np.zeros((2, 4), bool)
    bad = depth.copy()
    bad[0, 0] = 0.3
    with pytest.raises(DataError):
        RangeImage(bad, depth, valid, cfg)
    valid[0, 0] = True
    with pytest.raises(DataError):
        RangeImage(depth, depth, valid, cfg)
    with pytest.raises(DimensionError):
        RangeImage(np.zeros((3, 4)), depth, valid, cfg)


def test_from_channels_applies_the_threshold():
    cfg = SensorConfig(height=2, width=2)
    channels = np.array([[[-0.99, 0.1], [0.5, 3.0]], [[-1.0, -1.0], [0.2, -1.0]]])
    image = RangeImage.from_channels(channels, cfg)
    assert image.valid.tolist() == [[False, True], [False, True]]
    assert image.intensity[0, 1] == 1.0
    assert image.depth[0, 0] == RAY_DROP and image.intensity[0, 0] == RAY_DROP

    forced = RangeImage.from_channels(channels, cfg, valid=np.ones((2, 2), bool))
    assert forced.valid.all()
    assert forced.depth[1, 0] > RAY_DROP
    # a kept pixel at the ray-drop depth is lifted whatever its intensity
    lifted = RangeImage.from_channels(np.full((2, 2, 2), [-1.0, 0.5]), cfg, valid=np.ones((2, 2), bool))
    assert np.all(lifted.depth > RAY_DROP)
    assert unproject(lifted).ranges.min() >= cfg.min_range - 1e-12


def test_mask_kinds(small_sensor):
    half = make_mask("beam_keep_half", small_sensor)
    assert half[0::2].all() and not half[1::2].any()
    quarter = make_mask("beam_keep_quarter", small_sensor)
    assert quarter.sum() == small_sensor.width * small_sensor.height // 4

    valid = np.ones((small_sensor.height, small_sensor.width), bool)
    valid[:, :16] = False
    random = make_mask("random_keep_10pct", small_sensor, seed=5, valid=valid)
    assert not random[:, :16].any()
    assert np.array_equal(random, make_mask("random_keep_10pct", small_sensor, seed=5, valid=valid))
    with pytest.raises(ConfigError):
        make_mask("keep_all", small_sensor)


def test_random_mask_keeps_about_ten_percent():
    cfg = SensorConfig()
    fraction = make_mask("random_keep_10pct", cfg, seed=0).mean()
    assert 0.09 < fraction < 0.11


def test_bev_rasterize_counts_points_inside_the_extent():
    points = np.array([[1.0, 1.0, 0.0, 0.5], [1.2, 1.1, 0.0, 0.5], [-49.0, 20.0, 0.0, 0.1], [80.0, 0.0, 0.0, 0.1]])
    grid = bev_rasterize(PointCloud(points), n=10, extent=50.0)
    assert grid.counts.sum() == 3
    assert grid.counts[5, 5] == 2
    assert grid.counts[0, 7] == 1
    assert grid.cell_size == 10.0
    with pytest.raises(ConfigError):
        bev_rasterize(PointCloud(points), n=1)


def test_scan_files_round_trip(tmp_path, cloud):
    path = tmp_path / "000001.bin"
    write_scan_bin(cloud, path)
    assert path.stat().st_size == len(cloud) * 16
    loaded = read_scan_bin(path)
    np.testing.assert_allclose(loaded.points, cloud.points.astype(np.float32), rtol=0, atol=0)


def test_truncated_scan_names_the_byte_offset(tmp_path):
    path = tmp_path / "broken.bin"
    path.write_bytes(np.ones(9, dtype="<f4").tobytes())
    with pytest.raises(DataError, match="offset 32"):
        read_scan_bin(path)


def test_unusable_records_are_skipped_and_counted(tmp_path, caplog):
    records = np.array([[1.0, 2.0, 0.0, 0.5], [np.nan, 0.0, 0.0, 0.1], [0.0, 0.0, 0.0, 0.3]], dtype="<f4")
    path = tmp_path / "gaps.bin"
    records.tofile(path)
    with caplog.at_level(logging.WARNING, logger="EqDiff"):
        cloud = read_scan_bin(path)
    assert len(cloud) == 1
    assert "skipped 2 records" in caplog.text


def test_range_image_artifacts_round_trip(tmp_path, cloud, small_sensor):
    image = project(cloud, small_sensor)
    save_range_image(image, tmp_path / "frame", dtype="f64", meta={"source": "synthetic"})
    loaded = load_range_image(tmp_path / "frame")
    assert loaded.config == small_sensor
    assert np.array_equal(loaded.valid, image.valid)
    assert np.array_equal(loaded.depth, image.depth)


def test_depth_png_spans_sixteen_bits(tmp_path):
    cfg = SensorConfig(height=2, width=2)
    image = RangeImage.from_channels(np.array([[[1.0, 0.0], [-1.0, -1.0]], [[0.0, 0.0], [0.5, 0.5]]]), cfg)
    export_depth_png(image, tmp_path / "depth.png")
    pixels = np.array(Image.open(tmp_path / "depth.png")).astype(np.int64)
    assert pixels[0, 0] == 65535 and pixels[0, 1] == 0
    assert pixels[1, 0] == 32768
