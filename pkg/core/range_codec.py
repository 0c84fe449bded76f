"""Equirectangular range images: projection, masks, BEV grids and scan I/O."""

import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

from core.errors import ConfigError, DataError, DimensionError
from core.params import load_array, save_array

logger = logging.getLogger("EqDiff")

RAY_DROP = -1.0
# smallest depth offset a valid pixel keeps above the ray-drop code
VALID_FLOOR = 1e-6
MASK_KINDS = ("beam_keep_half", "beam_keep_quarter", "random_keep_10pct")


@dataclass(frozen=True)
class SensorConfig:
    height: int = 64
    width: int = 1024
    fov_up: float = 3.0
    fov_down: float = -25.0
    min_range: float = 0.5
    max_range: float = 80.0

    def __post_init__(self):
        if self.height < 2 or self.width < 2 or self.height % 2 or self.width % 2:
            raise ConfigError(f"sensor grid must be even and at least 2x2, got {self.height}x{self.width}")
        if not self.fov_up > self.fov_down:
            raise ConfigError(f"fov_up ({self.fov_up}) must exceed fov_down ({self.fov_down})")
        if not 0 < self.min_range < self.max_range:
            raise ConfigError(f"need 0 < min_range < max_range, got {self.min_range} and {self.max_range}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "SensorConfig":
        if name not in SENSOR_PRESETS:
            raise ConfigError(f"unknown sensor preset {name!r}; choose from {', '.join(SENSOR_PRESETS)}")
        values = dict(SENSOR_PRESETS[name])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_dict(cls, values: dict) -> "SensorConfig":
        try:
            return cls(**values)
        except TypeError as e:
            raise DataError(f"bad sensor description {values}: {e}") from e

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def fov_up_rad(self) -> float:
        return np.radians(self.fov_up)

    @property
    def fov_down_rad(self) -> float:
        return np.radians(self.fov_down)

    def bin_center_angles(self, height: Optional[int] = None, width: Optional[int] = None):
        """Elevation per row and azimuth per column at the bin centres, in radians."""
        height = height or self.height
        width = width or self.width
        up, down = self.fov_up_rad, self.fov_down_rad
        elevation = up - (np.arange(height) + 0.5) / height * (up - down)
        azimuth = np.pi - (np.arange(width) + 0.5) * 2.0 * np.pi / width
        return elevation, azimuth


SENSOR_PRESETS = {
    "kitti64": {"height": 64, "width": 1024, "fov_up": 3.0, "fov_down": -25.0, "min_range": 0.5, "max_range": 80.0},
    "nuscenes32": {"height": 32, "width": 1024, "fov_up": 10.0, "fov_down": -30.0, "min_range": 0.5, "max_range": 70.0},
}


@dataclass
class PointCloud:
    """N x 4 array of (x, y, z, intensity) rows."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.size == 0:
            points = np.zeros((0, 4))
        elif points.ndim != 2 or points.shape[1] != 4:
            raise DimensionError(f"point cloud must be N x 4, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise DataError("point cloud contains non-finite coordinates")
        if len(points) and np.any(np.linalg.norm(points[:, :3], axis=1) <= 0):
            raise DataError("point cloud contains a point at the sensor origin")
        points[:, 3] = np.clip(points[:, 3], 0.0, 1.0)
        self.points = points

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.xyz, axis=1)


@dataclass
class RangeImage:
    """Normalized depth and intensity planes plus the validity mask."""

    depth: np.ndarray
    intensity: np.ndarray
    valid: np.ndarray
    config: SensorConfig

    def __post_init__(self):
        shape = (self.config.height, self.config.width)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        for plane in (self.depth, self.intensity, self.valid):
            if plane.shape != shape:
                raise DimensionError(f"range image plane has shape {plane.shape}, sensor expects {shape}")
        dropped = ~self.valid
        if np.any(self.depth[dropped] != RAY_DROP) or np.any(self.intensity[dropped] != RAY_DROP):
            raise DataError("invalid pixels must carry depth = intensity = -1")
        if np.any((self.depth[self.valid] == RAY_DROP) & (self.intensity[self.valid] == RAY_DROP)):
            raise DataError("valid pixel encoded with the ray-drop code")

    @property
    def shape(self) -> tuple:
        return self.depth.shape

    @classmethod
    def empty(cls, config: SensorConfig) -> "RangeImage":
        shape = (config.height, config.width)
        return cls(np.full(shape, RAY_DROP), np.full(shape, RAY_DROP), np.zeros(shape, bool), config)

    @classmethod
    def from_channels(
        cls,
        channels: np.ndarray,
        config: SensorConfig,
        valid: Optional[np.ndarray] = None,
        ray_drop_threshold: float = -0.95,
    ) -> "RangeImage":
        """Build an image from an H x W x 2 array such as a sampler output.

        Without an explicit mask, pixels whose depth does not exceed
        ``ray_drop_threshold`` are treated as dropped rays.
        """
        channels = np.clip(np.asarray(channels, dtype=np.float64), -1.0, 1.0)
        if channels.ndim != 3 or channels.shape[2] != 2:
            raise DimensionError(f"expected H x W x 2 channels, got shape {channels.shape}")
        depth, intensity = channels[..., 0].copy(), channels[..., 1].copy()
        valid = depth > ray_drop_threshold if valid is None else np.asarray(valid, dtype=bool)
        depth[~valid] = RAY_DROP
        intensity[~valid] = RAY_DROP
        collide = valid & (depth <= RAY_DROP)
        depth[collide] = RAY_DROP + VALID_FLOOR
        return cls(depth, intensity, valid, config)

    def channels(self) -> np.ndarray:
        """H x W x 2 (depth, intensity): the diffusion state."""
        return np.stack([self.depth, self.intensity], axis=-1)

    def stack(self) -> np.ndarray:
        """H x W x 3 (depth, intensity, valid) as stored on disk."""
        return np.stack([self.depth, self.intensity, self.valid.astype(np.float64)], axis=-1)


@dataclass
class BevGrid:
    counts: np.ndarray
    extent: float

    @property
    def size(self) -> int:
        return self.counts.shape[0]

    @property
    def cell_size(self) -> float:
        return 2.0 * self.extent / self.size


def encode_depth(r, cfg: SensorConfig):
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < cfg.min_range) or np.any(r > cfg.max_range) or not np.all(np.isfinite(r)):
        raise DataError(f"range outside [{cfg.min_range}, {cfg.max_range}] m cannot be encoded")
    v = 2.0 * np.log(r / cfg.min_range) / np.log(cfg.max_range / cfg.min_range) - 1.0
    return v if v.ndim else float(v)


def decode_depth(v, cfg: SensorConfig):
    """Inverse of :func:`encode_depth`; the ray-drop code decodes to 0.0."""
    v = np.asarray(v, dtype=np.float64)
    r = cfg.min_range * np.exp((v + 1.0) / 2.0 * np.log(cfg.max_range / cfg.min_range))
    r = np.where(v <= RAY_DROP, 0.0, np.clip(r, cfg.min_range, cfg.max_range))
    return r if r.ndim else float(r)


def project(pc: PointCloud, cfg: SensorConfig) -> RangeImage:
    """Project a cloud onto the sensor grid; the nearest point wins each pixel."""
    image = RangeImage.empty(cfg)
    if len(pc) == 0:
        return image
    r = pc.ranges
    elevation = np.arcsin(np.clip(pc.xyz[:, 2] / r, -1.0, 1.0))
    azimuth = np.arctan2(pc.xyz[:, 1], pc.xyz[:, 0])
    up, down = cfg.fov_up_rad, cfg.fov_down_rad
    keep = (r >= cfg.min_range) & (r <= cfg.max_range) & (elevation >= down) & (elevation <= up)
    if not np.any(keep):
        return image
    r, elevation, azimuth, intensity = r[keep], elevation[keep], azimuth[keep], pc.intensity[keep]

    rows = np.floor(cfg.height * (1.0 - (elevation - down) / (up - down))).astype(np.int64)
    rows = np.clip(rows, 0, cfg.height - 1)
    cols = np.floor(cfg.width * (np.pi - azimuth) / (2.0 * np.pi)).astype(np.int64) % cfg.width

    flat = rows * cfg.width + cols
    order = np.lexsort((r, flat))
    _, first = np.unique(flat[order], return_index=True)
    winners = order[first]

    depth = image.depth.reshape(-1)
    inten = image.intensity.reshape(-1)
    valid = image.valid.reshape(-1)
    depth[flat[winners]] = encode_depth(r[winners], cfg)
    inten[flat[winners]] = 2.0 * intensity[winners] - 1.0
    valid[flat[winners]] = True
    collide = valid & (depth <= RAY_DROP)
    depth[collide] = RAY_DROP + VALID_FLOOR
    return RangeImage(depth.reshape(image.shape), inten.reshape(image.shape), valid.reshape(image.shape), cfg)


def unproject(img: RangeImage) -> PointCloud:
    """One point per valid pixel, placed at the bin-centre angles."""
    rows, cols = np.nonzero(img.valid)
    if len(rows) == 0:
        return PointCloud()
    elevation, azimuth = img.config.bin_center_angles()
    el, az = elevation[rows], azimuth[cols]
    # a valid pixel never decodes to the ray-drop range
    r = np.maximum(decode_depth(img.depth[rows, cols], img.config), img.config.min_range)
    intensity = np.clip((img.intensity[rows, cols] + 1.0) / 2.0, 0.0, 1.0)
    points = np.stack(
        [r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el), intensity], axis=1
    )
    return PointCloud(points)


def make_mask(kind: str, cfg: SensorConfig, seed: int = 0, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Known-pixel mask for a densification experiment (True = kept)."""
    shape = (cfg.height, cfg.width)
    mask = np.zeros(shape, dtype=bool)
    if kind == "beam_keep_half":
        mask[0::2] = True
    elif kind == "beam_keep_quarter":
        mask[0::4] = True
    elif kind == "random_keep_10pct":
        mask = np.random.default_rng(seed).random(shape) < 0.1
        if valid is not None:
            mask &= np.asarray(valid, dtype=bool)
    else:
        raise ConfigError(f"unknown mask kind {kind!r}; choose from {', '.join(MASK_KINDS)}")
    return mask


def bev_rasterize(pc: PointCloud, n: int = 64, extent: float = 50.0) -> BevGrid:
    if n < 2 or extent <= 0:
        raise ConfigError(f"BEV grid needs n >= 2 and extent > 0, got n={n}, extent={extent}")
    counts = np.zeros((n, n), dtype=np.int64)
    if len(pc):
        x, y = pc.xyz[:, 0], pc.xyz[:, 1]
        inside = (np.abs(x) < extent) & (np.abs(y) < extent)
        cell = 2.0 * extent / n
        ix = np.clip(np.floor((x[inside] + extent) / cell).astype(np.int64), 0, n - 1)
        iy = np.clip(np.floor((y[inside] + extent) / cell).astype(np.int64), 0, n - 1)
        np.add.at(counts, (ix, iy), 1)
    return BevGrid(counts, float(extent))


def read_scan_bin(path) -> PointCloud:
    """Parse a KITTI-style scan of little-endian float32 (x, y, z, intensity) records."""
    try:
        with open(path, "rb") as file:
            raw = file.read()
    except OSError as e:
        raise DataError(f"cannot read scan {path}: {e}") from e
    if len(raw) % 16:
        offset = len(raw) - len(raw) % 16
        raise DataError(f"{path}: truncated record at byte offset {offset} (file is {len(raw)} bytes)")
    records = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    usable = np.all(np.isfinite(records), axis=1)
    usable[usable] = np.linalg.norm(records[usable, :3], axis=1) > 0
    skipped = int(np.count_nonzero(~usable))
    if skipped:
        logger.warning(f"{path}: skipped {skipped} records with non-finite values or zero range")
    return PointCloud(records[usable])


def write_scan_bin(pc: PointCloud, path) -> None:
    os.makedirs(os.path.dirname(str(path)) or ".", exist_ok=True)
    pc.points.astype("<f4").tofile(path)


def save_range_image(image: RangeImage, stem, dtype: str = "f32", meta: Optional[dict] = None):
    extra = {"kind": "range_image", "channels": ["depth", "intensity", "valid"], "sensor": image.config.to_dict()}
    extra.update(meta or {})
    return save_array(stem, image.stack(), dtype=dtype, meta=extra)


def load_range_image(stem) -> RangeImage:
    array, sidecar = load_array(stem)
    if "sensor" not in sidecar or array.ndim != 3 or array.shape[2] != 3:
        raise DataError(f"{stem} is not a range-image artifact (shape {array.shape})")
    cfg = SensorConfig.from_dict(sidecar["sensor"])
    return RangeImage.from_channels(array[..., :2], cfg, valid=array[..., 2] > 0.5)


def export_depth_png(image: RangeImage, path) -> None:
    """16-bit grayscale view of the depth plane, [-1, 1] mapped to [0, 65535]."""
    scaled = np.round((np.clip(image.depth, -1.0, 1.0) + 1.0) / 2.0 * 65535.0).astype("<u2")
    Image.fromarray(scaled).save(path)
