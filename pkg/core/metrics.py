"""Distribution and reconstruction metrics for generated range images."""

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import eigh
from scipy.spatial.distance import cdist
from scipy.special import rel_entr

from core.errors import DataError, DimensionError, NumericError
from core.range_codec import BevGrid, RangeImage

logger = logging.getLogger("EqDiff")

LN2 = float(np.log(2.0))


def occupancy_histogram(grids: Sequence[BevGrid]) -> np.ndarray:
    """Counts summed over a sample set, normalized once to a distribution."""
    if not grids:
        raise DataError("occupancy histogram needs at least one grid")
    shapes = {g.counts.shape for g in grids}
    if len(shapes) != 1:
        raise DimensionError(f"BEV grids differ in shape: {sorted(shapes)}")
    total = np.sum([g.counts for g in grids], axis=0).astype(np.float64)
    mass = total.sum()
    if mass == 0:
        raise DataError("every BEV grid in the set is empty")
    return total / mass


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats, in [0, ln 2]."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"histograms differ in shape: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise DataError("histograms must be non-negative")
    m = 0.5 * (p + q)
    value = 0.5 * rel_entr(p, m).sum() + 0.5 * rel_entr(q, m).sum()
    return float(np.clip(value, 0.0, LN2))


def probability_map(grid: BevGrid) -> np.ndarray:
    counts = grid.counts.astype(np.float64).reshape(-1)
    total = counts.sum()
    return counts / total if total > 0 else counts


def mmd(gen: Sequence[BevGrid], ref: Sequence[BevGrid]) -> float:
    """Mean over reference grids of the squared-L2 distance to the closest generated grid."""
    if not gen or not ref:
        raise DataError(f"MMD needs non-empty sets, got {len(gen)} generated and {len(ref)} reference grids")
    g = np.stack([probability_map(grid) for grid in gen])
    r = np.stack([probability_map(grid) for grid in ref])
    if g.shape[1] != r.shape[1]:
        raise DimensionError(f"grid sizes differ: {g.shape[1]} vs {r.shape[1]} cells")
    distances = cdist(r, g, metric="sqeuclidean")
    return float(distances.min(axis=1).mean())


def masked_error(pred: RangeImage, truth: RangeImage, eval_mask: np.ndarray) -> dict[str, dict[str, float]]:
    """Per-channel MAE and RMSE over ``eval_mask`` and the truth's valid pixels."""
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ")
    eval_mask = np.asarray(eval_mask, dtype=bool)
    if eval_mask.shape != truth.shape:
        raise DimensionError(f"mask shape {eval_mask.shape} does not match image {truth.shape}")
    region = eval_mask & truth.valid
    if not np.any(region):
        raise DataError("evaluation mask selects no valid pixels")
    result = {}
    for channel in ("depth", "intensity"):
        diff = getattr(pred, channel)[region] - getattr(truth, channel)[region]
        result[channel] = {"mae": float(np.abs(diff).mean()), "rmse": float(np.sqrt((diff * diff).mean()))}
    return result


def feature_statistics(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of feature rows."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise DataError(f"need at least two feature rows, got shape {features.shape}")
    return features.mean(axis=0), np.cov(features, rowvar=False).reshape(features.shape[1], features.shape[1])


def frechet_distance(mu1, sigma1, mu2, sigma2, tolerance: float = 1e-8) -> float:
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, dtype=np.float64)), np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    sigma1, sigma2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    d = mu1.shape[0]
    if mu2.shape != (d,) or sigma1.shape != (d, d) or sigma2.shape != (d, d):
        raise DimensionError(f"inconsistent Gaussian shapes: {mu1.shape}, {sigma1.shape}, {mu2.shape}, {sigma2.shape}")
    for name, sigma in (("sigma1", sigma1), ("sigma2", sigma2)):
        if not np.allclose(sigma, sigma.T, atol=tolerance * max(1.0, np.abs(sigma).max())):
            raise DataError(f"{name} is not symmetric")

    root1 = _psd_sqrt(sigma1, tolerance, "sigma1")
    inner = root1 @ sigma2 @ root1
    values = eigh(0.5 * (inner + inner.T), eigvals_only=True)
    if values.min() < -tolerance * max(1.0, np.abs(values).max()):
        raise NumericError(f"covariance product has a negative eigenvalue {values.min():.3g}")
    trace_root = np.sqrt(np.clip(values, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * trace_root)


def _psd_sqrt(sigma: np.ndarray, tolerance: float, name: str) -> np.ndarray:
    values, vectors = eigh(sigma)
    if values.min() < -tolerance * max(1.0, np.abs(values).max()):
        raise DataError(f"{name} is not positive semi-definite (eigenvalue {values.min():.3g})")
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


@dataclass
class MetricReport:
    """Named scalar results together with the settings that produced them."""

    values: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, name: str, value: float) -> None:
        value = float(value)
        if not np.isfinite(value):
            raise NumericError(f"metric {name} is not finite")
        self.values[name] = value

    def to_dict(self) -> dict:
        return {"metrics": dict(self.values), "config": dict(self.config)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as file:
            file.write(self.to_json())
        logger.info(f"Metric report written to {path}")
