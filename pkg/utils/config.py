import configparser
import logging
import os
from typing import Any, Optional

from core.diffusion import SamplerConfig
from core.denoiser import DenoiserConfig
from core.errors import ConfigError
from core.params import config_digest
from core.range_codec import SENSOR_PRESETS, SensorConfig

logger = logging.getLogger("EqDiff")

SEED_ENV = "EQDIFF_SEED"


class RunConfig:
    """Experiment configuration: ``key = value`` lines grouped in sections.

    Every value is typed by its default. Keys outside DEFAULT_CONFIG are
    rejected so a typo never silently falls back to a default.
    """

    DEFAULT_CONFIG = {
        "sensor": {
            "preset": "kitti64",
            **SENSOR_PRESETS["kitti64"],
        },
        "denoiser": {
            "levels": 4,
            "channels": 64,
            "heads": 4,
            "ffn_expansion": 4,
            "windows": ((2, 8), (2, 8), (2, 4), (2, 4)),
            "overlaps": ((1, 4), (1, 4), (0, 0), (0, 0)),
            "fourier_freqs": 6,
            "text_dim": 512,
            "text_tokens": 4,
            "time_dim": 0,
            "decoder_layers": 0,
            "use_ea": True,
            "use_rea": True,
            "use_cei": True,
            "use_fm": True,
            "timestep_product": "diagonal",
            "cei_values": "timestep",
            "zero_init_head": True,
        },
        "training": {
            "steps": 2000,
            "batch": 1,
            "lr": 1e-4,
            "beta1": 0.9,
            "beta2": 0.99,
            "seed": 0,
            "text_drop": 0.1,
            "checkpoint_every": 500,
            "log_every": 10,
        },
        "sampler": {
            "steps": 256,
            "seed": 0,
            "resample_n": 1,
            "ray_drop_threshold": -0.95,
            "caption": "",
        },
        "metrics": {
            "bev_size": 64,
            "bev_extent": 50.0,
        },
        "text": {
            "provider": "hashed_bow",
            "dim": 512,
            "seed": 0,
            "bank": "",
            "rules": "",
        },
    }

    def __init__(self, config_file: Optional[str] = None, apply_env: bool = True):
        self.config_file = config_file
        self.config = configparser.ConfigParser(interpolation=None)
        self.explicit: set[tuple[str, str]] = set()
        self._load(apply_env)

    def _load(self, apply_env: bool) -> None:
        """Load configuration from file, then fill defaults."""
        if self.config_file:
            if not os.path.exists(self.config_file):
                raise ConfigError(f"config file {self.config_file} does not exist")
            try:
                self.config.read(self.config_file, encoding="utf-8")
            except configparser.Error as e:
                raise ConfigError(f"cannot parse {self.config_file}: {e}") from e

        for section in self.config.sections():
            if section not in self.DEFAULT_CONFIG:
                raise ConfigError(f"unknown config section [{section}]")
            for key in self.config[section]:
                if key not in self.DEFAULT_CONFIG[section]:
                    raise ConfigError(f"unknown config key {key!r} in [{section}]")
                self.explicit.add((section, key))
                self.get(section, key)

        for section, values in self.DEFAULT_CONFIG.items():
            if section not in self.config:
                self.config[section] = {}
            for key, value in values.items():
                if key not in self.config[section]:
                    self.config[section][key] = self._format(value)
        self._fill_sensor_preset()

        seed = os.environ.get(SEED_ENV) if apply_env else None
        if seed:
            logger.info(f"{SEED_ENV}={seed} overrides the training and sampler seeds")
            self.set("training", "seed", seed)
            self.set("sampler", "seed", seed)

    def _fill_sensor_preset(self) -> None:
        """Sensor keys not given explicitly follow the selected preset."""
        preset = self.config["sensor"]["preset"].strip()
        for key, value in SENSOR_PRESETS.get(preset, {}).items():
            if ("sensor", key) not in self.explicit:
                self.config["sensor"][key] = self._format(value)

    @staticmethod
    def _format(value: Any) -> str:
        if isinstance(value, tuple):
            return ",".join("x".join(str(v) for v in pair) for pair in value)
        return str(value)

    def _parse(self, section: str, key: str, text: str) -> Any:
        default = self.DEFAULT_CONFIG[section][key]
        try:
            if isinstance(default, bool):
                lowered = text.strip().lower()
                if lowered not in self.config.BOOLEAN_STATES:
                    raise ValueError(f"not a boolean: {text!r}")
                return self.config.BOOLEAN_STATES[lowered]
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
            if isinstance(default, tuple):
                return tuple(tuple(int(v) for v in pair.strip().split("x")) for pair in text.split(",") if pair.strip())
            return text.strip()
        except ValueError as e:
            raise ConfigError(f"[{section}] {key} = {text!r}: {e}") from e

    def _check(self, section: str, key: str) -> None:
        if section not in self.DEFAULT_CONFIG:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self.DEFAULT_CONFIG[section]:
            raise ConfigError(f"unknown config key {key!r} in [{section}]")

    def get(self, section: str, key: str) -> Any:
        """Get a typed configuration value."""
        self._check(section, key)
        if section in self.config and key in self.config[section]:
            return self._parse(section, key, self.config[section][key])
        return self.DEFAULT_CONFIG[section][key]

    def set(self, section: str, key: str, value: Any) -> None:
        """Set a configuration value, validating it against the default's type."""
        self._check(section, key)
        text = self._format(value)
        self._parse(section, key, text)
        self.config[section][key] = text
        self.explicit.add((section, key))
        if (section, key) == ("sensor", "preset"):
            self._fill_sensor_preset()

    def section(self, section: str) -> dict[str, Any]:
        return {key: self.get(section, key) for key in self.DEFAULT_CONFIG[section]}

    def resolved(self) -> dict[str, dict[str, Any]]:
        return {section: self.section(section) for section in self.DEFAULT_CONFIG}

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.resolved() == other.resolved()

    def hash(self) -> str:
        return config_digest(self.resolved())

    def save(self, path: Optional[str] = None) -> str:
        """Save the resolved configuration; loading it back gives an equal config."""
        path = path or self.config_file
        if not path:
            raise ConfigError("no path to save the configuration to")
        writer = configparser.ConfigParser(interpolation=None)
        for section, values in self.resolved().items():
            writer[section] = {key: self._format(value) for key, value in values.items()}
        with open(path, "w", encoding="utf-8") as f:
            writer.write(f)
        logger.info(f"Configuration saved to {path}")
        return path

    def sensor_config(self) -> SensorConfig:
        values = self.section("sensor")
        preset = values.pop("preset")
        if preset not in SENSOR_PRESETS:
            raise ConfigError(f"unknown sensor preset {preset!r}; choose from {', '.join(SENSOR_PRESETS)}")
        overrides = {key: value for key, value in values.items() if ("sensor", key) in self.explicit}
        return SensorConfig.preset(preset, **overrides)

    def denoiser_config(self) -> DenoiserConfig:
        values = self.section("denoiser")
        values["time_dim"] = values["time_dim"] or None
        values["decoder_layers"] = values["decoder_layers"] or None
        return DenoiserConfig(**values)

    def sampler_config(self, text=None) -> SamplerConfig:
        values = self.section("sampler")
        return SamplerConfig(steps=values["steps"], seed=values["seed"], text=text, resample_n=values["resample_n"])

    def training_options(self):
        from core.trainer import TrainingOptions

        return TrainingOptions(**self.section("training"))

    def metric_options(self) -> dict[str, Any]:
        return self.section("metrics")

    def text_options(self) -> dict[str, Any]:
        return self.section("text")
