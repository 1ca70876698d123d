"""Volumes, masks, the RVOL file format and the synthetic CT generator."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"RVL1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI3I3fBB")
HEADER_SIZE = _HEADER.size  # 34 bytes

DTYPE_F32 = 0
DTYPE_MASK = 1


class VolumeFormatError(ValueError):
    """Malformed RVOL header."""


class VolumeLengthError(VolumeFormatError):
    """RVOL payload shorter or longer than the header declares."""


class PlacementError(RuntimeError):
    """A synthetic lesion could not be placed inside the lung region."""


class ValueSpace(enum.IntEnum):
    HU = 0
    NORMALIZED = 1
    MAP = 2


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar field, z-major, with per-axis spacing in mm."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    value_space: ValueSpace = ValueSpace.HU

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"volume must be 3D with positive dims, got shape {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "value_space", ValueSpace(self.value_space))
        if self.value_space == ValueSpace.NORMALIZED and vox.size:
            if not (np.all(vox >= -0.5) and np.all(vox <= 0.5)):
                raise ValueError("normalized volume has voxels outside [-0.5, 0.5]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sz, sy, sx = self.spacing
        return sz * sy * sx


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray
    spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        bits = np.asarray(self.bits).astype(bool)
        if bits.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.bits.shape)

    def volume_cm3(self) -> float:
        sz, sy, sx = self.spacing
        return float(self.bits.sum()) * sz * sy * sx / 1000.0


def _pack(array: np.ndarray, spacing, dtype_code: int, value_space: int) -> bytes:
    d, h, w = array.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, d, h, w, *spacing, dtype_code, value_space)
    if dtype_code == DTYPE_F32:
        payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    else:
        payload = np.ascontiguousarray(array, dtype=np.uint8).tobytes()
    return header + payload


def volume_to_bytes(v: Volume) -> bytes:
    if not np.all(np.isfinite(v.voxels)):
        raise ValueError("volume contains non-finite voxels")
    return _pack(v.voxels, v.spacing, DTYPE_F32, int(v.value_space))


def mask_to_bytes(m: Mask) -> bytes:
    return _pack(m.bits.astype(np.uint8), m.spacing, DTYPE_MASK, int(ValueSpace.HU))


def _unpack(data: bytes):
    if len(data) < HEADER_SIZE:
        raise VolumeFormatError(f"file too short for RVOL header ({len(data)} bytes)")
    magic, version, d, h, w, sz, sy, sx, dtype_code, space = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"unsupported RVOL version {version}")
    if dtype_code not in (DTYPE_F32, DTYPE_MASK):
        raise VolumeFormatError(f"unknown dtype code {dtype_code}")
    if space not in tuple(ValueSpace):
        raise VolumeFormatError(f"unknown value space {space}")
    if min(d, h, w) < 1:
        raise VolumeFormatError(f"non-positive dims {(d, h, w)}")
    n = d * h * w
    itemsize = 4 if dtype_code == DTYPE_F32 else 1
    expected = HEADER_SIZE + n * itemsize
    if len(data) != expected:
        raise VolumeLengthError(f"payload length mismatch: expected {expected} bytes, got {len(data)}")
    dt = "<f4" if dtype_code == DTYPE_F32 else np.uint8
    arr = np.frombuffer(data, dtype=dt, count=n, offset=HEADER_SIZE).reshape(d, h, w)
    return arr, (sz, sy, sx), dtype_code, space


def volume_from_bytes(data: bytes) -> Volume:
    arr, spacing, dtype_code, space = _unpack(data)
    if dtype_code != DTYPE_F32:
        raise VolumeFormatError("expected a float volume, found a mask")
    return Volume(arr.astype(np.float32), spacing, ValueSpace(space))


def mask_from_bytes(data: bytes) -> Mask:
    arr, spacing, dtype_code, _ = _unpack(data)
    if dtype_code != DTYPE_MASK:
        raise VolumeFormatError("expected a mask, found a float volume")
    if arr.max(initial=0) > 1:
        raise VolumeFormatError("mask payload must contain only 0/1 bytes")
    return Mask(arr.astype(bool), spacing)


def read_volume(path) -> Volume:
    return volume_from_bytes(Path(path).read_bytes())


def write_volume(v: Volume, path) -> None:
    Path(path).write_bytes(volume_to_bytes(v))


def read_mask(path) -> Mask:
    return mask_from_bytes(Path(path).read_bytes())


def write_mask(m: Mask, path) -> None:
    Path(path).write_bytes(mask_to_bytes(m))


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    seed: int = 0
    texture_smoothness: float = 1.5
    lesion_count: int = 0
    lesion_radius_mm: float = 10.0
    lesion_intensity_shift: float = 300.0


AIR_HU = -1000.0
LUNG_HU = -800.0
LUNG_HU_SPREAD = 100.0
AIR_NOISE_HU = 10.0
MAX_PLACEMENT_RETRIES = 1000


def _ellipsoid(shape, center, semi_axes) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi_axes))
    return r2 <= 1.0


def _lung_region(dims) -> np.ndarray:
    center = [(n - 1) / 2.0 for n in dims]
    semi = [0.4 * n for n in dims]
    return _ellipsoid(dims, center, semi)


def generate_synthetic(spec: SynthSpec) -> tuple[Volume, Mask, Mask]:
    """Build a lung-like HU volume with optional lesions.

    Returns ``(volume, lung_mask, lesion_mask)``. The output is a pure
    function of ``spec``; HU values are rounded to integers like real CT.
    """
    dims = tuple(int(n) for n in spec.dims)
    if min(dims) < 16:
        raise ValueError(f"synthetic volumes need >= 16 voxels per axis, got {dims}")
    if spec.texture_smoothness <= 0:
        raise ValueError("texture_smoothness must be positive")
    if spec.lesion_count < 0:
        raise ValueError("lesion_count must be non-negative")
    rng = np.random.default_rng(np.uint64(spec.seed))

    noise = rng.standard_normal(dims)
    texture = ndimage.gaussian_filter(noise, spec.texture_smoothness, mode="wrap")
    texture /= texture.std()
    air_noise = rng.standard_normal(dims)

    lung = _lung_region(dims)
    hu = AIR_HU + AIR_NOISE_HU * air_noise
    # +-3 sigma of the texture spans +-LUNG_HU_SPREAD
    lung_hu = LUNG_HU + (LUNG_HU_SPREAD / 3.0) * np.clip(texture, -3.0, 3.0)
    hu[lung] = lung_hu[lung]

    lesions = np.zeros(dims, dtype=bool)
    semi = [spec.lesion_radius_mm / s for s in spec.spacing]
    # forbid touching lesions so each one stays its own 26-connected component
    guard = ndimage.generate_binary_structure(3, 3)
    for i in range(spec.lesion_count):
        forbidden = ndimage.binary_dilation(lesions, guard, iterations=1)
        for _ in range(MAX_PLACEMENT_RETRIES):
            center = rng.uniform([0, 0, 0], [n - 1 for n in dims])
            c_idx = tuple(int(round(c)) for c in center)
            if not lung[c_idx]:
                continue
            blob = _ellipsoid(dims, center, semi)
            if not blob.any() or np.any(blob & ~lung) or np.any(blob & forbidden):
                continue
            lesions |= blob
            break
        else:
            raise PlacementError(
                f"could not place lesion {i + 1} of radius {spec.lesion_radius_mm} mm "
                f"after {MAX_PLACEMENT_RETRIES} tries"
            )
    hu[lesions] += spec.lesion_intensity_shift

    volume = Volume(np.round(hu).astype(np.float32), spec.spacing, ValueSpace.HU)
    return volume, Mask(lung, spec.spacing), Mask(lesions, spec.spacing)
