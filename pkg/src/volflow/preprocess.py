"""Isotropic resampling, HU windowing and lung-mask acquisition."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Mask, ValueSpace, Volume

log = logging.getLogger(__name__)

LUNG_BAND_HU = (-950.0, -300.0)
MIN_LUNG_COMPONENT_CM3 = 1.0
MAX_LUNG_COMPONENTS = 2


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing_mm: float = 2.0
    hu_min: float = -1020.0
    hu_max: float = 200.0
    out_lo: float = -0.5
    out_hi: float = 0.5

    def __post_init__(self):
        if self.target_spacing_mm <= 0:
            raise ValueError("target_spacing_mm must be positive")
        if not self.hu_min < self.hu_max:
            raise ValueError("hu_min must be below hu_max")
        if not self.out_lo < self.out_hi:
            raise ValueError("out_lo must be below out_hi")


def _resample_axis(a: np.ndarray, axis: int, spacing: float, target: float) -> np.ndarray:
    n_in = a.shape[axis]
    n_out = max(1, math.floor(n_in * spacing / target + 0.5))
    # voxel i spans [i*s, (i+1)*s); sample output centres in input index space
    pos = (np.arange(n_out) + 0.5) * (target / spacing) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1, 1, 1]
    shape[axis] = n_out
    frac = frac.reshape(shape)
    v0 = np.take(a, lo, axis=axis)
    v1 = np.take(a, hi, axis=axis)
    # v0 + t*(v1 - v0) keeps constants exact
    return v0 + frac * (v1 - v0)


def resample(v: Volume, target_spacing_mm: float) -> Volume:
    """Trilinear resampling to isotropic ``target_spacing_mm``, clamped at the borders."""
    if not target_spacing_mm > 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing_mm}")
    out = v.voxels.astype(np.float64)
    for axis in range(3):
        out = _resample_axis(out, axis, v.spacing[axis], target_spacing_mm)
    t = float(target_spacing_mm)
    return Volume(out.astype(np.float32), (t, t, t), v.value_space)


def resample_mask(m: Mask, target_spacing_mm: float) -> Mask:
    as_vol = Volume(m.bits.astype(np.float32), m.spacing, ValueSpace.HU)
    r = resample(as_vol, target_spacing_mm)
    return Mask(r.voxels >= 0.5, r.spacing)


def clip_normalize(v: Volume, cfg: PreprocessConfig = PreprocessConfig()) -> Volume:
    x = np.clip(v.voxels.astype(np.float64), cfg.hu_min, cfg.hu_max)
    y = cfg.out_lo + (x - cfg.hu_min) * (cfg.out_hi - cfg.out_lo) / (cfg.hu_max - cfg.hu_min)
    y = np.clip(y.astype(np.float32), cfg.out_lo, cfg.out_hi)
    return Volume(y, v.spacing, ValueSpace.NORMALIZED)


def _touches_all_faces(sl: tuple[slice, ...], dims) -> bool:
    return all(s.start == 0 and s.stop == n for s, n in zip(sl, dims))


def fallback_lung_mask(v: Volume) -> Mask:
    """Threshold-and-components lung mask for when no segmentation is supplied.

    Keeps at most the two largest 26-connected components of the lung HU
    band that are at least 1 cm^3 and do not touch all six volume faces,
    then closes them with a radius-1 ball. An empty result is logged, not
    raised.
    """
    lo, hi = LUNG_BAND_HU
    band = (v.voxels >= lo) & (v.voxels <= hi)
    labels, n = ndimage.label(band, structure=np.ones((3, 3, 3), dtype=bool))
    keep = np.zeros(v.dims, dtype=bool)
    if n:
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        slices = ndimage.find_objects(labels)
        min_voxels = MIN_LUNG_COMPONENT_CM3 * 1000.0 / v.voxel_volume_mm3
        candidates = [
            lab for lab in range(1, n + 1)
            if sizes[lab] >= min_voxels and not _touches_all_faces(slices[lab - 1], v.dims)
        ]
        candidates.sort(key=lambda lab: (-sizes[lab], lab))
        for lab in candidates[:MAX_LUNG_COMPONENTS]:
            keep |= labels == lab
    if keep.any():
        ball = ndimage.generate_binary_structure(3, 1)
        keep = ndimage.binary_closing(keep, structure=ball)
    else:
        log.warning("fallback lung mask is empty")
    return Mask(keep, v.spacing)


def preprocess(
    v: Volume, cfg: PreprocessConfig = PreprocessConfig(), mask: Mask | None = None
) -> tuple[Volume, Mask]:
    """Resample, acquire the lung mask in HU space, then window to the normalized range.

    A supplied ``mask`` (at the input resolution) takes precedence over the
    fallback heuristic.
    """
    if v.value_space != ValueSpace.HU:
        raise ValueError("preprocess expects a volume in HU")
    if mask is not None and mask.dims != v.dims:
        raise ValueError(f"mask dims {mask.dims} do not match volume dims {v.dims}")
    rv = resample(v, cfg.target_spacing_mm)
    if mask is not None:
        m = resample_mask(Mask(mask.bits, v.spacing), cfg.target_spacing_mm)
    else:
        m = fallback_lung_mask(rv)
    return clip_normalize(rv, cfg), m
