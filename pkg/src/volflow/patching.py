"""Training-patch sampling and the overlapping inference grid."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .volume import Mask, Volume


class SamplingError(ValueError):
    pass


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Patch:
    data: np.ndarray
    origin: tuple[int, int, int]


@dataclass(frozen=True)
class GridSpec:
    patch_edge: int = 48
    overlap: int = 10

    def __post_init__(self):
        if self.patch_edge < 1:
            raise GridError("patch_edge must be positive")
        if not 0 <= self.overlap < self.patch_edge:
            raise GridError("overlap must satisfy 0 <= overlap < patch_edge")

    @property
    def stride(self) -> int:
        return self.patch_edge - self.overlap


def axis_positions(dim: int, g: GridSpec) -> list[int]:
    if dim < g.patch_edge:
        raise GridError(f"axis of {dim} voxels is shorter than patch edge {g.patch_edge}")
    last = dim - g.patch_edge
    positions = list(range(0, last + 1, g.stride))
    if positions[-1] != last:
        positions.append(last)
    return positions


def inference_grid(dims, g: GridSpec) -> list[tuple[int, int, int]]:
    """Lexicographic patch origins covering every voxel of ``dims``."""
    per_axis = [axis_positions(int(n), g) for n in dims]
    return [tuple(o) for o in itertools.product(*per_axis)]


def mask_coverage(mask: np.ndarray, edge: int) -> np.ndarray:
    """Number of mask voxels inside each edge^3 window, indexed by window origin."""
    sat = np.zeros(tuple(n + 1 for n in mask.shape), dtype=np.int64)
    sat[1:, 1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
    e = edge
    return (
        sat[e:, e:, e:]
        - sat[:-e, e:, e:] - sat[e:, :-e, e:] - sat[e:, e:, :-e]
        + sat[:-e, :-e, e:] + sat[:-e, e:, :-e] + sat[e:, :-e, :-e]
        - sat[:-e, :-e, :-e]
    )


def valid_origins(mask: Mask, edge: int, min_mask_fraction: float = 0.5) -> np.ndarray:
    if any(n < edge for n in mask.dims):
        raise SamplingError(f"volume dims {mask.dims} smaller than patch edge {edge}")
    cov = mask_coverage(mask.bits, edge)
    ok = cov >= min_mask_fraction * edge**3
    return np.argwhere(ok)


def sample_origins(
    mask: Mask, n: int, edge: int, min_mask_fraction: float = 0.5, seed=0
) -> np.ndarray:
    """Draw ``n`` origins uniformly among windows with enough mask coverage.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if n == 0:
        return np.zeros((0, 3), dtype=np.int64)
    origins = valid_origins(mask, edge, min_mask_fraction)
    if len(origins) == 0:
        raise SamplingError(
            f"no patch origin reaches min_mask_fraction={min_mask_fraction}"
        )
    rng = np.random.default_rng(seed)
    return origins[rng.integers(0, len(origins), size=n)]


def extract(voxels: np.ndarray, origin, edge: int) -> np.ndarray:
    z, y, x = (int(o) for o in origin)
    return voxels[z:z + edge, y:y + edge, x:x + edge]


def sample_training_patches(
    v: Volume, m: Mask, n: int, edge: int = 48, min_mask_fraction: float = 0.5, seed=0
) -> list[Patch]:
    if m.dims != v.dims:
        raise SamplingError(f"mask dims {m.dims} do not match volume dims {v.dims}")
    if n and not m.bits.any():
        raise SamplingError("mask is empty")
    origins = sample_origins(m, n, edge, min_mask_fraction, seed)
    return [
        Patch(extract(v.voxels, o, edge).copy(), tuple(int(c) for c in o)) for o in origins
    ]
