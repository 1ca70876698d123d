"""Whole-volume inference: patch scores -> Log P map -> patient label."""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .flow import Glow3D
from .patching import GridSpec, extract, inference_grid, mask_coverage
from .volume import Mask, ValueSpace, Volume, write_volume

T_MIN_CM3 = 0.5
T_MAX_CM3 = 20.0
MIN_CALIBRATION_SCORES = 100

Score = tuple[tuple[int, int, int], float]


class ConfigError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


class Label(str, enum.Enum):
    NORMAL = "Normal"
    ABNORMAL = "Abnormal"


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridSpec = GridSpec()
    smoothing_sigma_vox: float = 2.0
    binarize_quantile: float = 0.02
    min_component_cm3: float = 0.1
    decision_threshold_T_cm3: float = 5.0
    calibration: tuple[float, ...] | None = None

    def __post_init__(self):
        if not T_MIN_CM3 <= self.decision_threshold_T_cm3 <= T_MAX_CM3:
            raise ConfigError(
                f"decision threshold must lie in [{T_MIN_CM3}, {T_MAX_CM3}] cm^3, "
                f"got {self.decision_threshold_T_cm3}"
            )
        if not 0.0 < self.binarize_quantile < 1.0:
            raise ConfigError("binarize_quantile must be strictly between 0 and 1")
        if self.smoothing_sigma_vox < 0 or self.min_component_cm3 < 0:
            raise ConfigError("smoothing sigma and min component volume must be non-negative")


@dataclass
class LogPMap:
    values: np.ndarray
    coverage: np.ndarray

    @property
    def dims(self):
        return self.values.shape


@dataclass
class PatientResult:
    anomaly_volume_cm3: float
    label: Label
    threshold_T: float
    scores: list[Score] = field(default_factory=list)
    logp_map_path: str | None = None

    def to_json(self, include_scores: bool = False) -> dict:
        out = {
            "anomaly_volume_cm3": self.anomaly_volume_cm3,
            "label": self.label.value,
            "threshold_T": self.threshold_T,
            "n_patches": len(self.scores),
        }
        if include_scores:
            out["per_patch_scores"] = [
                {"origin": list(o), "per_dim_nats": s} for o, s in self.scores
            ]
        if self.logp_map_path is not None:
            out["logp_map_path"] = self.logp_map_path
        return out


# --------------------------------------------------------------------------
# scoring


@torch.no_grad()
def _score_chunk(model: Glow3D, voxels: np.ndarray, origins, edge: int) -> list[float]:
    dtype = next(model.parameters()).dtype
    batch = np.stack([extract(voxels, o, edge) for o in origins])[:, None]
    nats = model.log_prob(torch.from_numpy(batch).to(dtype))
    return (nats.double() / model.cfg.n_dims).tolist()


def score_volume(v: Volume, mask: Mask | None, model: Glow3D, grid: GridSpec,
                 batch_size: int = 64, workers: int = 1) -> list[Score]:
    """Per-dimension log-likelihood of every grid patch, in lexicographic origin order.

    Patches are scored in fixed chunks of ``batch_size`` so that serial and
    threaded runs (``workers > 1``) see identical batches.
    """
    edge = grid.patch_edge
    if model.cfg.patch_edge != edge:
        raise ConfigError(f"model patch edge {model.cfg.patch_edge} != grid patch edge {edge}")
    if mask is not None and mask.dims != v.dims:
        raise ConfigError(f"mask dims {mask.dims} do not match volume dims {v.dims}")
    if any(n < edge for n in v.dims):
        raise ConfigError(f"volume dims {v.dims} smaller than patch edge {edge}")
    origins = inference_grid(v.dims, grid)
    chunks = [origins[i:i + batch_size] for i in range(0, len(origins), batch_size)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _score_chunk(model, v.voxels, c, edge), chunks))
    else:
        parts = [_score_chunk(model, v.voxels, c, edge) for c in chunks]
    values = [s for part in parts for s in part]
    return list(zip(origins, values))


# --------------------------------------------------------------------------
# aggregation


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):  # tiny sigma: off-centre weights underflow to 0
        return np.exp(-0.5 * (k / sigma) ** 2)


def smooth(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing, kernel renormalized over in-bounds support."""
    if sigma == 0:
        return values.astype(np.float64, copy=True)
    kernel = gaussian_kernel(sigma)
    # smoothing the offset from a reference value keeps constant fields exact
    ref = float(values.flat[0])
    out = values.astype(np.float64) - ref
    ones = np.ones_like(out)
    for axis in range(out.ndim):
        num = ndimage.correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
        den = ndimage.correlate1d(ones, kernel, axis=axis, mode="constant", cval=0.0)
        out = num / den
    return out + ref


def aggregate_map(scores: Sequence[Score], dims, grid: GridSpec, sigma: float) -> LogPMap:
    """Mean of covering patch scores per voxel, then Gaussian smoothing."""
    if not scores:
        raise ValueError("cannot aggregate an empty score list")
    edge = grid.patch_edge
    ref = float(scores[0][1])
    total = np.zeros(dims, dtype=np.float64)
    count = np.zeros(dims, dtype=np.int64)
    for origin, s in scores:
        z, y, x = origin
        sl = (slice(z, z + edge), slice(y, y + edge), slice(x, x + edge))
        total[sl] += s - ref
        count[sl] += 1
    raw = np.where(count > 0, total / np.maximum(count, 1), 0.0) + ref
    return LogPMap(smooth(raw, sigma), count)


# --------------------------------------------------------------------------
# post-processing


def calibrate(scores: Sequence[float]) -> tuple[float, ...]:
    """Sorted reference distribution of per-dim scores from normal validation patches."""
    if len(scores) < MIN_CALIBRATION_SCORES:
        raise CalibrationError(
            f"calibration needs at least {MIN_CALIBRATION_SCORES} scores, got {len(scores)}"
        )
    return tuple(sorted(float(s) for s in scores))


def lung_patch_scores(scores: Sequence[Score], mask: Mask, edge: int) -> list[float]:
    """Scores of grid patches that overlap the lung mask.

    These are exactly the patches that contribute to the masked Log P map,
    so they form the calibration population.
    """
    cov = mask_coverage(mask.bits, edge)
    return [s for o, s in scores if cov[o] > 0]


def calibration_threshold(calibration: Sequence[float], q: float) -> float:
    if len(calibration) == 0:
        raise CalibrationError("empty calibration distribution")
    return float(np.quantile(np.asarray(calibration, dtype=np.float64), q))


def binarize(logp: LogPMap, mask: Mask, calibration: Sequence[float], q: float) -> Mask:
    theta = calibration_threshold(calibration, q)
    if mask.dims != logp.dims:
        raise ConfigError(f"mask dims {mask.dims} do not match map dims {logp.dims}")
    return Mask((logp.values < theta) & mask.bits, mask.spacing)


def filter_components(bin_mask: Mask, spacing, min_cm3: float) -> Mask:
    """Drop 26-connected components smaller than ``min_cm3``."""
    if min(spacing) <= 0:
        raise ValueError("spacing must be positive")
    if min_cm3 <= 0:
        return Mask(bin_mask.bits.copy(), spacing)
    labels, n = ndimage.label(bin_mask.bits, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return Mask(bin_mask.bits.copy(), spacing)
    voxel_cm3 = spacing[0] * spacing[1] * spacing[2] / 1000.0
    sizes = np.bincount(labels.ravel(), minlength=n + 1) * voxel_cm3
    keep = sizes >= min_cm3
    keep[0] = False
    return Mask(keep[labels], spacing)


def classify(bin_mask: Mask, spacing, t_cm3: float) -> PatientResult:
    if not T_MIN_CM3 <= t_cm3 <= T_MAX_CM3:
        raise ConfigError(f"threshold {t_cm3} outside [{T_MIN_CM3}, {T_MAX_CM3}] cm^3")
    vol = float(bin_mask.bits.sum()) * spacing[0] * spacing[1] * spacing[2] / 1000.0
    label = Label.ABNORMAL if vol > t_cm3 else Label.NORMAL
    return PatientResult(vol, label, t_cm3)


def anomaly_volume(logp: LogPMap, mask: Mask, cfg: PipelineConfig) -> float:
    """Flagged lung volume in cm^3 after binarization and component filtering."""
    if cfg.calibration is None:
        raise CalibrationError("pipeline config has no calibration distribution")
    bin_mask = binarize(logp, mask, cfg.calibration, cfg.binarize_quantile)
    filtered = filter_components(bin_mask, mask.spacing, cfg.min_component_cm3)
    return filtered.volume_cm3()


def run_patient(v: Volume, mask: Mask, model: Glow3D, cfg: PipelineConfig,
                workers: int = 1) -> tuple[PatientResult, LogPMap]:
    scores = score_volume(v, mask, model, cfg.grid, workers=workers)
    logp = aggregate_map(scores, v.dims, cfg.grid, cfg.smoothing_sigma_vox)
    if cfg.calibration is None:
        raise CalibrationError("pipeline config has no calibration distribution")
    bin_mask = binarize(logp, mask, cfg.calibration, cfg.binarize_quantile)
    filtered = filter_components(bin_mask, v.spacing, cfg.min_component_cm3)
    result = classify(filtered, v.spacing, cfg.decision_threshold_T_cm3)
    result.scores = scores
    return result, logp


def write_logp_map(logp: LogPMap, spacing, path) -> None:
    write_volume(Volume(logp.values.astype(np.float32), spacing, ValueSpace.MAP), path)


# --------------------------------------------------------------------------
# config files


def save_calibration(calibration: Sequence[float], path) -> None:
    Path(path).write_text(json.dumps({"per_dim_nats": list(calibration)}))


def load_calibration(path) -> tuple[float, ...]:
    data = json.loads(Path(path).read_text())
    values = data["per_dim_nats"] if isinstance(data, dict) else data
    if not values:
        raise CalibrationError(f"{path}: empty calibration")
    return tuple(sorted(float(s) for s in values))


def config_to_text(cfg: PipelineConfig) -> str:
    return "\n".join([
        f"patch_edge={cfg.grid.patch_edge}",
        f"overlap={cfg.grid.overlap}",
        f"smoothing_sigma_vox={cfg.smoothing_sigma_vox!r}",
        f"binarize_quantile={cfg.binarize_quantile!r}",
        f"min_component_cm3={cfg.min_component_cm3!r}",
        f"decision_threshold_T_cm3={cfg.decision_threshold_T_cm3!r}",
    ]) + "\n"


def config_from_values(values: dict[str, str], calibration=None) -> PipelineConfig:
    grid = GridSpec(int(values.get("patch_edge", 48)), int(values.get("overlap", 10)))
    return PipelineConfig(
        grid=grid,
        smoothing_sigma_vox=float(values.get("smoothing_sigma_vox", 2.0)),
        binarize_quantile=float(values.get("binarize_quantile", 0.02)),
        min_component_cm3=float(values.get("min_component_cm3", 0.1)),
        decision_threshold_T_cm3=float(values.get("decision_threshold_T_cm3", 5.0)),
        calibration=calibration,
    )
