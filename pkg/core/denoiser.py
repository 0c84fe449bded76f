"""Equirectangular transformer noise predictor.

Layout: patch embedding with angle features, ``levels`` encoder stages of
wrapped, overlapping window attention that halve the grid, a control
injector at the bottleneck, mirrored decoder stages each ending in a
control injector, a wavelet frequency modulator and a linear output head.
"""

import logging
from dataclasses import asdict, dataclass
from math import lcm
from typing import Optional, Sequence

import numpy as np

from core.errors import ConfigError, DataError, DimensionError
from core.layers import CEI_VALUES, ControlInjector, Linear, WindowedBlock, downsample, upsample
from core.ops import conv2d, dwt_haar, fold, gelu, idwt_haar, sigmoid, unfold
from core.params import ParameterStore, read_checkpoint
from core.range_codec import SensorConfig
from core.tensor import Tensor, as_tensor, broadcast_to, concat

logger = logging.getLogger("EqDiff")

TIMESTEP_SCALE = 1000.0


@dataclass
class DenoiserConfig:
    levels: int = 4
    channels: int = 64
    heads: int = 4
    ffn_expansion: int = 4
    windows: tuple = ((2, 8), (2, 8), (2, 4), (2, 4))
    overlaps: tuple = ((1, 4), (1, 4), (0, 0), (0, 0))
    fourier_freqs: int = 6
    text_dim: int = 512
    text_tokens: int = 4
    time_dim: Optional[int] = None
    decoder_layers: Optional[int] = None
    use_ea: bool = True
    use_rea: bool = True
    use_cei: bool = True
    use_fm: bool = True
    timestep_product: str = "diagonal"
    cei_values: str = "timestep"
    zero_init_head: bool = True

    def __post_init__(self):
        self.windows = tuple(tuple(int(v) for v in w) for w in self.windows)
        self.overlaps = tuple(tuple(int(v) for v in o) for o in self.overlaps)
        self.time_dim = int(self.time_dim or self.channels)
        self.decoder_layers = int(self.decoder_layers or self.levels)
        if self.levels < 2:
            raise ConfigError(f"denoiser needs at least 2 levels, got {self.levels}")
        if self.channels < 1 or self.channels % self.heads:
            raise ConfigError(f"channel width {self.channels} must be positive and divisible by {self.heads} heads")
        if self.time_dim % 2:
            raise ConfigError(f"timestep embedding width must be even, got {self.time_dim}")
        if not 1 <= self.decoder_layers <= self.levels:
            raise ConfigError(f"decoder_layers must lie in [1, {self.levels}], got {self.decoder_layers}")
        if not self.windows or len(self.windows) != len(self.overlaps):
            raise ConfigError("every window needs a matching overlap")
        for window, overlap in zip(self.windows, self.overlaps):
            if min(window) < 1 or min(overlap) < 0 or any(o >= w for o, w in zip(overlap, window)):
                raise ConfigError(f"window {window} with overlap {overlap} leaves no stride")
        if min(self.fourier_freqs, self.text_dim, self.text_tokens, self.ffn_expansion) < 1:
            raise ConfigError("fourier_freqs, text_dim, text_tokens and ffn_expansion must be positive")
        if self.timestep_product not in ("diagonal", "matrix"):
            raise ConfigError(f"timestep_product must be 'diagonal' or 'matrix', got {self.timestep_product!r}")
        if self.cei_values not in CEI_VALUES:
            raise ConfigError(f"cei_values must be one of {', '.join(CEI_VALUES)}, got {self.cei_values!r}")

    @classmethod
    def from_dict(cls, values: dict) -> "DenoiserConfig":
        try:
            return cls(**values)
        except TypeError as e:
            raise DataError(f"bad denoiser description: {e}") from e

    def to_dict(self) -> dict:
        values = asdict(self)
        values["windows"] = [list(w) for w in self.windows]
        values["overlaps"] = [list(o) for o in self.overlaps]
        return values

    def width(self, level: int) -> int:
        """Channel width of the grid at ``level`` (0 = full resolution)."""
        if level == 0:
            return self.channels
        return min(self.channels * 2 ** (level - 1), 8 * self.channels)

    def window(self, level: int) -> tuple:
        return self.windows[min(level, len(self.windows) - 1)]

    def tiling(self, level: int, overlapped: bool) -> tuple:
        """(window, stride, wrap) of the attention windows at ``level``."""
        window = self.window(level)
        if not overlapped:
            return window, window, False
        overlap = self.overlaps[min(level, len(self.overlaps) - 1)]
        return window, (window[0] - overlap[0], window[1] - overlap[1]), True


def resolution_problems(cfg: DenoiserConfig, height: int, width: int) -> list[str]:
    problems = []
    step = 2 ** cfg.levels
    if height % step or width % step:
        problems.append(f"{height}x{width} is not divisible by 2^{cfg.levels}")
        return problems
    for level in range(cfg.levels):
        h, w = cfg.window(level)
        hl, wl = height >> level, width >> level
        if h > hl or w > wl or wl % w:
            problems.append(f"window {h}x{w} does not tile level {level} grid {hl}x{wl}")
        stride = cfg.tiling(level, True)[1][1]
        if (cfg.use_ea or cfg.use_rea) and wl % stride:
            problems.append(f"wrapped stride {stride} does not divide level {level} width {wl}")
    return problems


def valid_resolutions(cfg: DenoiserConfig, count: int = 4) -> tuple[list[int], list[int]]:
    """The smallest heights and widths the configuration accepts."""
    step = 2 ** cfg.levels
    min_height = max(cfg.window(level)[0] << level for level in range(cfg.levels))
    heights = [h for h in range(step, 64 * step + 1, step) if h >= min_height][:count]
    wrapped_strides = [cfg.tiling(level, True)[1][1] << level for level in range(cfg.levels)]
    width_step = lcm(step, *(cfg.window(level)[1] << level for level in range(cfg.levels)), *wrapped_strides)
    widths = [width_step * k for k in range(1, count + 1)]
    return heights, widths


def fourier_encode(phi, theta, freqs: int) -> np.ndarray:
    """Per k: sin(2^k phi), cos(2^k phi), sin(2^k theta), cos(2^k theta)."""
    phi, theta = np.broadcast_arrays(np.asarray(phi, dtype=np.float64), np.asarray(theta, dtype=np.float64))
    channels = []
    for k in range(freqs):
        scale = 2.0**k
        channels += [np.sin(scale * phi), np.cos(scale * phi), np.sin(scale * theta), np.cos(scale * theta)]
    return np.stack(channels, axis=-1)


def fourier_features(freqs: int, sensor: SensorConfig, height: Optional[int] = None, width: Optional[int] = None):
    """H x W x 4K angle features at the bin centres of an H x W grid."""
    elevation, azimuth = sensor.bin_center_angles(height, width)
    return fourier_encode(elevation[:, None], azimuth[None, :], freqs)


def timestep_features(t: float, dim: int) -> np.ndarray:
    if dim % 2:
        raise ConfigError(f"timestep embedding width must be even, got {dim}")
    if not 0.0 <= float(t) <= 1.0:
        raise ConfigError(f"timestep must lie in [0, 1], got {t}")
    half = dim // 2
    omega = TIMESTEP_SCALE * 10000.0 ** (-np.arange(half) / half)
    return np.concatenate([np.sin(t * omega), np.cos(t * omega)])


class TimestepEmbedding:
    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.dim = dim
        self.proj = Linear(store, f"{name}.proj", dim, dim)

    def __call__(self, t: float) -> Tensor:
        return gelu(self.proj(timestep_features(t, self.dim)))


class FrequencyModulator:
    """Gate the four Haar subbands of a feature grid with learned maps."""

    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.dim = dim
        scale = 1.0 / np.sqrt(9 * dim)
        self.kernel1 = store.create(f"{name}.conv1.kernel", (3, 3, dim, dim), scale=scale)
        self.bias1 = store.create(f"{name}.conv1.bias", (dim,), "zeros")
        self.kernel2 = store.create(f"{name}.conv2.kernel", (3, 3, dim, 4 * dim), scale=scale)
        self.bias2 = store.create(f"{name}.conv2.bias", (4 * dim,), "zeros")

    def gates(self, e: Tensor) -> list[Tensor]:
        height, width, _ = e.shape
        hidden = gelu(conv2d(e, self.kernel1) + self.bias1)
        maps = conv2d(hidden, self.kernel2) + self.bias2
        pooled = maps.reshape(height // 2, 2, width // 2, 2, 4 * self.dim).mean(axis=(1, 3))
        gated = sigmoid(pooled)
        d = self.dim
        return [gated[..., k * d:(k + 1) * d] for k in range(4)]

    def __call__(self, e: Tensor, forced_gates: Optional[Sequence] = None) -> Tensor:
        e = as_tensor(e)
        if e.shape[0] % 2 or e.shape[1] % 2:
            raise DimensionError(f"frequency modulator needs even extents, got {e.shape}")
        bands = dwt_haar(e)
        gates = forced_gates if forced_gates is not None else self.gates(e)
        return idwt_haar(*(band * gate for band, gate in zip(bands, gates)))


class EncoderStage:
    """Fourier concat, window attention, then a strided 2x2 merge."""

    def __init__(self, store: ParameterStore, cfg: DenoiserConfig, level: int):
        name = f"enc.l{level + 1}"
        w_in, w_out = cfg.width(level), cfg.width(level + 1)
        self.fourier = Linear(store, f"{name}.fourier", w_in + 4 * cfg.fourier_freqs, w_in) if cfg.use_ea else None
        window, stride, wrap = cfg.tiling(level, cfg.use_ea)
        self.block = WindowedBlock(store, f"{name}.ea", w_in, cfg.heads, window, stride, wrap, cfg.ffn_expansion)
        self.down = downsample(store, f"{name}.down", w_in, w_out)

    def __call__(self, h: Tensor, features: np.ndarray) -> tuple[Tensor, Tensor]:
        if h.shape[0] % 2 or h.shape[1] % 2:
            raise DimensionError(f"encoder stage needs even extents, got {h.shape}")
        if self.fourier is not None:
            h = self.fourier(concat([h, features], axis=-1))
        skip = self.block(h)
        return skip, self.down(skip)


class DecoderStage:
    """Up-projection, skip concat and projection; full stages add attention and control injection."""

    def __init__(self, store: ParameterStore, cfg: DenoiserConfig, level: int, plain: bool):
        name = f"dec.l{level + 1}"
        w_in, w_out = cfg.width(level + 1), cfg.width(level)
        self.plain = plain
        self.concat_conditioning = not plain and not cfg.use_cei
        self.up = upsample(store, f"{name}.up", w_in, w_out)
        extra = 2 * w_out if self.concat_conditioning else 0
        self.proj = Linear(store, f"{name}.proj", 2 * w_out + extra, w_out)
        self.block = self.cei = None
        if not plain:
            window, stride, wrap = cfg.tiling(level, cfg.use_rea)
            self.block = WindowedBlock(store, f"{name}.rea", w_out, cfg.heads, window, stride, wrap, cfg.ffn_expansion)
            self.window = window
            if cfg.use_cei:
                self.cei = ControlInjector(store, f"{name}.cei", w_out, cfg.heads, cfg.timestep_product, cfg.cei_values)

    def __call__(self, h: Tensor, skip: Tensor, text: Optional[Tensor], time: Optional[Tensor]) -> Tensor:
        up = self.up(h)
        if up.shape != skip.shape:
            raise DimensionError(f"decoder input upsampled to {up.shape} but the skip is {skip.shape}")
        parts = [up, skip]
        if self.concat_conditioning:
            parts += grid_conditioning(up.shape, text, time)
        h = self.proj(concat(parts, axis=-1))
        if self.plain:
            return h
        h = self.block(h)
        if self.cei is None:
            return h
        tokens = unfold(h, self.window, self.window)
        n = tokens.shape[0]
        hw = self.window[0] * self.window[1]
        width = h.shape[2]
        fused = self.cei(tokens.reshape(n, hw, width), text, time)
        return fold(fused.reshape(n, hw * width), h.shape, self.window, self.window)


def grid_conditioning(shape: tuple, text: Optional[Tensor], time: Tensor) -> list:
    """Text (mean token, or zeros) and timestep broadcast over a grid."""
    height, width, channels = shape
    text_plane = (
        np.zeros(shape) if text is None else broadcast_to(text.mean(axis=1).reshape(1, 1, channels), shape)
    )
    return [text_plane, broadcast_to(time.reshape(1, 1, channels), shape)]


class Denoiser:
    """Noise predictor ``eps_hat = model(x_t, t, text)`` for H x W x 2 states."""

    def __init__(self, config: DenoiserConfig, sensor: SensorConfig, seed: int = 0):
        problems = resolution_problems(config, sensor.height, sensor.width)
        if problems:
            heights, widths = valid_resolutions(config)
            raise DimensionError(
                f"resolution {sensor.height}x{sensor.width} is incompatible: {'; '.join(problems)}. "
                f"Valid heights include {heights}, valid widths include {widths}"
            )
        self.config = config
        self.sensor = sensor
        self.params = ParameterStore(seed)
        self.forced_gates = None
        self.manifest: dict = {}
        store, cfg, levels = self.params, config, config.levels

        self.features = [
            fourier_features(cfg.fourier_freqs, sensor, sensor.height >> level, sensor.width >> level)
            for level in range(levels)
        ]
        self.patch = Linear(store, "patch", 2 + 4 * cfg.fourier_freqs, cfg.channels)
        self.encoder = [EncoderStage(store, cfg, level) for level in range(levels)]
        self.time = TimestepEmbedding(store, "time", cfg.time_dim)

        plain = [level + 1 > cfg.decoder_layers for level in range(levels)]
        self.conditioned_levels = [levels] + [level for level in range(levels) if not plain[level]]
        tokens = cfg.text_tokens if cfg.use_cei else 1
        self.text_proj = {
            level: Linear(store, f"cond.text.l{level}", cfg.text_dim, tokens * cfg.width(level))
            for level in self.conditioned_levels
        }
        self.time_proj = {
            level: Linear(store, f"cond.time.l{level}", cfg.time_dim, cfg.width(level))
            for level in self.conditioned_levels
        }
        width_mid = cfg.width(levels)
        if cfg.use_cei:
            self.mid = ControlInjector(store, "mid.cei", width_mid, cfg.heads, cfg.timestep_product, cfg.cei_values)
        else:
            self.mid = Linear(store, "mid.fuse", 3 * width_mid, width_mid)
        self.decoder = [DecoderStage(store, cfg, level, plain[level]) for level in range(levels)]
        self.fm = FrequencyModulator(store, "fm", cfg.channels) if cfg.use_fm else None
        self.head = Linear(store, "head", cfg.channels, 2, zero=cfg.zero_init_head)
        logger.info(f"Denoiser built with {self.parameter_count()} parameters in {len(self.params)} slots")

    def parameter_count(self) -> int:
        return self.params.parameter_count()

    def conditioning(self, t: float, text: Optional[np.ndarray]) -> tuple[dict, dict]:
        """Per-level text tokens (or None) and timestep tokens."""
        if text is not None:
            text = np.asarray(text, dtype=np.float64).reshape(-1)
            if text.shape[0] != self.config.text_dim:
                raise DimensionError(f"text embedding has {text.shape[0]} values, model expects {self.config.text_dim}")
        m = self.time(t)
        texts, times = {}, {}
        for level in self.conditioned_levels:
            width = self.config.width(level)
            times[level] = self.time_proj[level](m).reshape(1, 1, width)
            texts[level] = None if text is None else self.text_proj[level](text).reshape(1, -1, width)
        return texts, times

    def bottleneck(self, h: Tensor, text: Optional[Tensor], time: Tensor) -> Tensor:
        height, width, channels = h.shape
        if self.config.use_cei:
            fused = self.mid(h.reshape(1, height * width, channels), text, time)
            return fused.reshape(height, width, channels)
        return self.mid(concat([h] + grid_conditioning(h.shape, text, time), axis=-1))

    def __call__(self, x_t, t: float, text: Optional[np.ndarray] = None) -> Tensor:
        x = as_tensor(x_t)
        expected = (self.sensor.height, self.sensor.width, 2)
        if x.shape != expected:
            raise DimensionError(f"denoiser expects input {expected}, got {x.shape}")
        texts, times = self.conditioning(t, text)
        h = self.patch(concat([x, self.features[0]], axis=-1))
        skips = []
        for level, stage in enumerate(self.encoder):
            skip, h = stage(h, self.features[level])
            skips.append(skip)
        levels = self.config.levels
        h = self.bottleneck(h, texts[levels], times[levels])
        for level in reversed(range(levels)):
            h = self.decoder[level](h, skips[level], texts.get(level), times.get(level))
        if self.fm is not None:
            h = self.fm(h, self.forced_gates)
        return self.head(h)

    def save(self, directory, config_hash: str = "", dtype: str = "f32"):
        payload = {"denoiser": self.config.to_dict(), "sensor": self.sensor.to_dict()}
        return self.params.save(directory, payload, config_hash, dtype)

    @classmethod
    def load(cls, directory) -> "Denoiser":
        manifest, state = read_checkpoint(directory)
        try:
            payload = manifest["config"]
            model = cls(
                DenoiserConfig.from_dict(payload["denoiser"]),
                SensorConfig.from_dict(payload["sensor"]),
                seed=int(manifest["seed"]),
            )
        except KeyError as e:
            raise DataError(f"checkpoint manifest in {directory} lacks {e}") from e
        model.params.load_state(state)
        model.manifest = manifest
        return model
