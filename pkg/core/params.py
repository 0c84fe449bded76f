"""Named parameter slots, the Adam optimizer and on-disk tensor formats."""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np

from core import __version__
from core.errors import ConfigError, DataError, DimensionError, NumericError
from core.tensor import Tensor

logger = logging.getLogger("EqDiff")

DTYPES = {"f32": "<f4", "f64": "<f8"}
MANIFEST = "manifest.json"


def save_array(stem, array: np.ndarray, dtype: str = "f32", meta: Optional[dict] = None) -> Path:
    """Write ``<stem>.<dtype>`` raw little-endian values plus ``<stem>.json``."""
    if dtype not in DTYPES:
        raise ConfigError(f"unknown tensor dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    stem = str(stem)
    os.makedirs(os.path.dirname(stem) or ".", exist_ok=True)
    array = np.asarray(array)
    array.astype(DTYPES[dtype]).tofile(f"{stem}.{dtype}")
    sidecar = {"shape": list(array.shape), "dtype": dtype, "order": "row-major"}
    sidecar.update(meta or {})
    with open(f"{stem}.json", "w") as file:
        json.dump(sidecar, file, indent=2)
    return Path(f"{stem}.json")


def load_array(stem) -> tuple[np.ndarray, dict]:
    """Read a tensor written by :func:`save_array` back as float64."""
    stem = str(stem)
    if stem.endswith(".json"):
        stem = stem[: -len(".json")]
    try:
        with open(f"{stem}.json", "r") as file:
            sidecar = json.load(file)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read tensor sidecar {stem}.json: {e}") from e
    dtype = sidecar.get("dtype")
    if dtype not in DTYPES or sidecar.get("order", "row-major") != "row-major":
        raise DataError(f"{stem}.json: unsupported dtype/order {dtype!r}/{sidecar.get('order')!r}")
    shape = tuple(int(n) for n in sidecar["shape"])
    raw = np.fromfile(f"{stem}.{dtype}", dtype=DTYPES[dtype])
    if raw.size != int(np.prod(shape)):
        raise DataError(f"{stem}.{dtype} holds {raw.size} values, sidecar shape {shape} needs {int(np.prod(shape))}")
    return raw.reshape(shape).astype(np.float64), sidecar


class ParameterStore:
    """Map from hierarchical slot name to a learnable tensor.

    Each slot is initialised from its own random stream derived from the
    store seed and the slot name, so identical configurations and seeds give
    bit-identical stores regardless of construction order.
    """

    def __init__(self, seed: int = 0):
        if int(seed) < 0:
            raise ConfigError(f"parameter seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._slots: dict[str, Tensor] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __getitem__(self, name: str) -> Tensor:
        return self._slots[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._slots)

    def __len__(self) -> int:
        return len(self._slots)

    def items(self):
        return self._slots.items()

    def create(self, name: str, shape: tuple, init: str = "normal", scale: Optional[float] = None) -> Tensor:
        if name in self._slots:
            raise ConfigError(f"parameter slot {name!r} defined twice")
        shape = tuple(int(n) for n in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            std = scale if scale is not None else 1.0 / np.sqrt(shape[0] if len(shape) > 1 else 1)
            data = np.random.default_rng(self._slot_entropy(name)).normal(0.0, std, shape)
        else:
            raise ConfigError(f"unknown initialiser {init!r} for {name}")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._slots[name] = tensor
        return tensor

    def _slot_entropy(self, name: str) -> list[int]:
        digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
        return [self.seed, int.from_bytes(digest, "little")]

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self._slots.values()))

    def zero_grad(self) -> None:
        for tensor in self._slots.values():
            tensor.grad = None

    def ensure_grads(self) -> None:
        for tensor in self._slots.values():
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._slots.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self._slots) - set(state))
        if missing:
            raise DataError(f"checkpoint lacks parameter slots: {', '.join(missing[:5])}")
        for name, tensor in self._slots.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise DimensionError(f"slot {name}: checkpoint shape {value.shape} != model shape {tensor.shape}")
            tensor.data = value.copy()

    def save(self, directory, config: Optional[dict] = None, config_hash: str = "", dtype: str = "f32") -> Path:
        """Write one tensor file per slot plus ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, tensor in self._slots.items():
            save_array(directory / name, tensor.data, dtype=dtype)
        manifest = {
            "format": "eqdiff-checkpoint",
            "code_version": __version__,
            "seed": self.seed,
            "config_hash": config_hash,
            "config": config or {},
            "dtype": dtype,
            "slots": list(self._slots),
        }
        with open(directory / MANIFEST, "w") as file:
            json.dump(manifest, file, indent=2)
        logger.info(f"Checkpoint with {len(self)} slots saved to {directory}")
        return directory / MANIFEST


def read_checkpoint(directory) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(manifest, state)`` of a checkpoint directory."""
    directory = Path(directory)
    try:
        with open(directory / MANIFEST, "r") as file:
            manifest = json.load(file)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read checkpoint manifest in {directory}: {e}") from e
    state = {name: load_array(directory / name)[0] for name in manifest.get("slots", [])}
    return manifest, state


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: ParameterStore,
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-8,
) -> ParameterStore:
    """One bias-corrected Adam update of every slot, in place."""
    for name, tensor in params.items():
        if tensor.grad is None:
            raise DataError(f"parameter {name} has no gradient; run backward first")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, tensor in params.items():
        g = tensor.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        tensor.data = tensor.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(tensor.data)):
            raise NumericError(f"Adam update made parameter {name} non-finite")
    return params


def config_digest(payload: Any) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode("utf-8")).hexdigest()
