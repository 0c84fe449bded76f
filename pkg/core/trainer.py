"""Noise-prediction training loop with Adam."""

import csv
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from core.denoiser import Denoiser
from core.diffusion import training_loss
from core.errors import ConfigError, DataError, DimensionError
from core.params import AdamState, adam_step
from core.tensor import Tape, backward

logger = logging.getLogger("EqDiff")


@dataclass
class TrainingOptions:
    steps: int = 2000
    batch: int = 1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    seed: int = 0
    text_drop: float = 0.1
    checkpoint_every: int = 500
    log_every: int = 10

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1:
            raise ConfigError(f"need steps >= 0 and batch >= 1, got {self.steps} and {self.batch}")
        if not 0.0 <= self.text_drop <= 1.0:
            raise ConfigError(f"text_drop must lie in [0, 1], got {self.text_drop}")
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam needs lr > 0 and betas in [0, 1)")


@dataclass
class TrainingExample:
    frame_id: str
    image: np.ndarray
    text: Optional[np.ndarray] = None


class Trainer:
    """Draws (image, t, noise, text-drop) per batch slot and takes one Adam step per batch."""

    def __init__(
        self,
        model: Denoiser,
        options: TrainingOptions,
        loss_log: Optional[str] = None,
        checkpoint_dir: Optional[str] = None,
        config_hash: str = "",
    ):
        self.model = model
        self.options = options
        self.loss_log = loss_log
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.config_hash = config_hash
        self.state = AdamState()
        self.rng = np.random.default_rng(options.seed)
        self.history: list[float] = []

    def check(self, examples: Sequence[TrainingExample]) -> None:
        if not examples:
            raise DataError("training needs at least one range image")
        expected = (self.model.sensor.height, self.model.sensor.width, 2)
        for example in examples:
            if example.image.shape != expected:
                raise DimensionError(
                    f"image {example.frame_id} has shape {example.image.shape}, the denoiser expects {expected}"
                )

    def step(self, examples: Sequence[TrainingExample]) -> float:
        params = self.model.params
        params.zero_grad()
        with Tape() as tape:
            total = None
            for _ in range(self.options.batch):
                example = examples[int(self.rng.integers(len(examples)))]
                t = float(self.rng.uniform(0.0, 1.0))
                eps = self.rng.standard_normal(example.image.shape)
                dropped = self.rng.random() < self.options.text_drop
                text = None if dropped else example.text
                loss = training_loss(self.model, example.image, t, eps, text)
                total = loss if total is None else total + loss
            total = total * (1.0 / self.options.batch)
        backward(total, tape, params)
        adam_step(params, self.state, self.options.lr, self.options.beta1, self.options.beta2)
        return total.item()

    def fit(self, examples: Sequence[TrainingExample]) -> list[float]:
        self.check(examples)
        logger.info(
            f"Training {self.model.parameter_count()} parameters on {len(examples)} images for {self.options.steps} steps"
        )
        started = time.perf_counter()
        for k in range(1, self.options.steps + 1):
            loss = self.step(examples)
            self.history.append(loss)
            self._log_loss(k, loss)
            if k % self.options.log_every == 0 or k == 1:
                logger.info(f"step {k}: loss {loss:.6f}")
            if self.checkpoint_dir and self.options.checkpoint_every and k % self.options.checkpoint_every == 0:
                self.model.save(self.checkpoint_dir / f"step_{k:06d}", self.config_hash)
        if self.checkpoint_dir:
            self.model.save(self.checkpoint_dir / "final", self.config_hash)
        logger.info(f"Training finished in {time.perf_counter() - started:.1f} s")
        return self.history

    def _log_loss(self, step: int, loss: float) -> None:
        if not self.loss_log:
            return
        fresh = not os.path.exists(self.loss_log)
        with open(self.loss_log, "a", newline="") as file:
            writer = csv.writer(file)
            if fresh:
                writer.writerow(["step", "loss"])
            writer.writerow([step, f"{loss:.10g}"])
