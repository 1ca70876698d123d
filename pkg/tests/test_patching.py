import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from volflow.patching import (
    GridError,
    GridSpec,
    SamplingError,
    axis_positions,
    inference_grid,
    mask_coverage,
    sample_origins,
    sample_training_patches,
)
from volflow.volume import Mask, ValueSpace, Volume


def _vol(shape, fill=0.0):
    return Volume(np.full(shape, fill, np.float32), (2, 2, 2), ValueSpace.NORMALIZED)


class TestGrid:
    @pytest.mark.parametrize(
        "dim, expected",
        [(48, [0]), (86, [0, 38]), (100, [0, 38, 52])],
    )
    def test_axis_positions(self, dim, expected):
        assert axis_positions(dim, GridSpec(48, 10)) == expected

    def test_product_order(self):
        origins = inference_grid((48, 86, 100), GridSpec(48, 10))
        assert len(origins) == 1 * 2 * 3
        assert origins == sorted(origins)
        assert origins[0] == (0, 0, 0)
        assert origins[-1] == (0, 38, 52)

    def test_too_small(self):
        with pytest.raises(GridError):
            inference_grid((47, 60, 60), GridSpec(48, 10))

    def test_bad_overlap(self):
        with pytest.raises(GridError):
            GridSpec(48, 48)

    @given(st.integers(1, 20), st.data())
    def test_coverage_and_overlap(self, edge, data):
        overlap = data.draw(st.integers(0, edge - 1))
        dim = data.draw(st.integers(edge, 6 * edge))
        g = GridSpec(edge, overlap)
        pos = axis_positions(dim, g)
        assert pos == sorted(set(pos))
        covered = np.zeros(dim, bool)
        for p in pos:
            covered[p:p + edge] = True
        assert covered.all()
        assert pos[-1] + edge == dim
        for a, b in zip(pos[:-2], pos[1:-1]):
            assert a + edge - b == overlap
        if len(pos) > 1:
            assert pos[-2] + edge - pos[-1] >= overlap


class TestCoverage:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        m = rng.random((9, 10, 11)) > 0.6
        cov = mask_coverage(m, 4)
        assert cov.shape == (6, 7, 8)
        for z, y, x in [(0, 0, 0), (5, 6, 7), (2, 3, 1)]:
            assert cov[z, y, x] == m[z:z + 4, y:y + 4, x:x + 4].sum()


class TestSampling:
    def test_single_origin(self):
        v = _vol((16, 16, 16))
        m = Mask(np.ones((16, 16, 16), bool))
        patches = sample_training_patches(v, m, 5, edge=16, seed=0)
        assert [p.origin for p in patches] == [(0, 0, 0)] * 5
        assert patches[0].data.shape == (16, 16, 16)

    def test_zero(self):
        v = _vol((16, 16, 16))
        m = Mask(np.ones((16, 16, 16), bool))
        assert sample_training_patches(v, m, 0, edge=8) == []

    def test_deterministic(self):
        m = Mask(np.ones((20, 20, 20), bool))
        a = sample_origins(m, 50, 8, seed=3)
        b = sample_origins(m, 50, 8, seed=3)
        np.testing.assert_array_equal(a, b)

    def test_respects_mask_fraction(self):
        bits = np.zeros((24, 24, 24), bool)
        bits[:12] = True
        m = Mask(bits)
        origins = sample_origins(m, 200, 8, min_mask_fraction=0.5, seed=1)
        for o in origins:
            assert bits[o[0]:o[0] + 8, o[1]:o[1] + 8, o[2]:o[2] + 8].mean() >= 0.5

    def test_no_valid_origin(self):
        bits = np.zeros((16, 16, 16), bool)
        bits[0, 0, 0] = True
        with pytest.raises(SamplingError, match="min_mask_fraction"):
            sample_origins(Mask(bits), 3, 8, min_mask_fraction=0.5)

    def test_uniform_origins_chi_square(self):
        m = Mask(np.ones((64, 64, 64), bool))
        origins = sample_origins(m, 10_000, 48, seed=123)
        assert origins.min() == 0 and origins.max() == 16
        for axis in range(3):
            counts = np.bincount(origins[:, axis], minlength=17)
            assert stats.chisquare(counts).pvalue > 0.01
        flat = np.ravel_multi_index(origins.T // 6, (3, 3, 3))  # coarse joint bins
        expected = np.bincount(np.arange(17) // 6, minlength=3) / 17.0
        joint_p = np.einsum("i,j,k->ijk", expected, expected, expected).ravel()
        counts = np.bincount(flat, minlength=27)
        assert stats.chisquare(counts, joint_p * 10_000).pvalue > 0.01
