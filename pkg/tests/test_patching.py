import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medsegpipe.errors import (
    GridShapeMismatch,
    InvalidPatchSpec,
    NotThreeDimensional,
    PatchCountMismatch,
)
from medsegpipe.patching import (
    compute_grid,
    extract_patches,
    is_blank,
    merge_patches,
    slice_2d,
)
from medsegpipe.volume import ClassMap, Volume


@st.composite
def grid_specs(draw, max_side=12, ndim=3):
    shape = tuple(draw(st.integers(1, max_side)) for _ in range(ndim))
    patch = tuple(draw(st.integers(1, max_side)) for _ in range(ndim))
    overlap = tuple(draw(st.integers(0, p - 1)) for p in patch)
    return shape, patch, overlap


def covered_counts(grid):
    """Brute-force voxel scan: how many patch footprints contain each index."""
    counts = np.zeros(grid.padded_shape, dtype=int)
    for origin in grid.origins:
        for idx in itertools.product(*[range(o, o + p) for o, p in zip(origin, grid.patch_shape)]):
            counts[idx] += 1
    return counts


def test_exact_tiling():
    g = compute_grid((100, 100, 100), (50, 50, 50), (0, 0, 0))
    assert len(g) == 8
    assert sorted({o[0] for o in g.origins}) == [0, 50]


def test_kits_stride():
    g = compute_grid((200, 400, 400), (80, 160, 160), (40, 80, 80))
    assert g.stride == (40, 80, 80)


def test_clamped_last_origin_1d():
    g = compute_grid((90,), (50,), (10,))
    assert [o[0] for o in g.origins] == [0, 40]
    assert np.all(covered_counts(g) >= 1)
    g = compute_grid((95,), (50,), (10,))
    assert [o[0] for o in g.origins] == [0, 40, 45]


def test_undersized_volume_is_padded():
    g = compute_grid((3, 10), (5, 4), (0, 0))
    assert g.padded_shape == (5, 10)
    assert g.original_shape == (3, 10)
    patches = extract_patches(np.ones((3, 10)), g)
    assert all(p.shape == (5, 4) for p in patches)
    assert np.all(patches[0][3:] == 0)


@pytest.mark.parametrize(
    "shape,patch,overlap",
    [((4, 4, 4), (4, 4, 4), (4, 0, 0)), ((4, 4, 4), (2, 2, 2), (2, 0, 0)), ((4,), (0,), (0,))],
)
def test_invalid_patch_spec(shape, patch, overlap):
    with pytest.raises(InvalidPatchSpec):
        compute_grid(shape, patch, overlap)


@settings(max_examples=150, deadline=None)
@given(grid_specs(max_side=9))
def test_grid_invariants(spec):
    shape, patch, overlap = spec
    g = compute_grid(shape, patch, overlap)
    assert all(0 <= o < p for o, p in zip(g.overlap, g.patch_shape))
    for origin in g.origins:
        assert all(o + p <= n for o, p, n in zip(origin, g.patch_shape, g.padded_shape))
    assert np.all(covered_counts(g) >= 1)
    assert list(g.origins) == sorted(g.origins)
    assert compute_grid(shape, patch, overlap) == g


def test_identity_grid():
    v = np.arange(24.0).reshape(2, 3, 4)
    (patch,) = extract_patches(v, compute_grid(v.shape, v.shape))
    np.testing.assert_array_equal(patch, v)


def test_ramp_tiling_matches_direct_slicing():
    v = np.arange(4 * 6 * 8, dtype=float).reshape(4, 6, 8)
    g = compute_grid(v.shape, (2, 3, 4), (0, 0, 0))
    patches = extract_patches(v, g)
    assert len(patches) == 8
    for (z, y, x), p in zip(g.origins, patches):
        np.testing.assert_array_equal(p, v[z : z + 2, y : y + 3, x : x + 4])


def test_extract_accepts_volume_and_classmap():
    data = np.arange(8.0).reshape(2, 2, 2)
    g = compute_grid((2, 2, 2), (1, 2, 2))
    vp = extract_patches(Volume(data, (1, 1, 1)), g)
    lp = extract_patches(ClassMap(data.astype(int) % 2, (1, 1, 1), 2), g)
    assert len(vp) == len(lp) == 2


def test_grid_shape_mismatch():
    g = compute_grid((4, 4, 4), (2, 2, 2))
    with pytest.raises(GridShapeMismatch):
        extract_patches(np.zeros((4, 4, 5)), g)
    with pytest.raises(GridShapeMismatch):
        extract_patches(np.zeros((4, 4)), g)


def test_is_blank():
    assert is_blank(np.zeros((3, 3, 3), dtype=int))
    p = np.zeros((3, 3, 3), dtype=int)
    p[1, 2, 0] = 1
    assert not is_blank(p)
    rng = np.random.default_rng(1)
    for _ in range(50):
        patch = (rng.random((3, 3, 3)) < 0.02).astype(int)
        assert is_blank(patch) == all(v == 0 for v in patch.ravel().tolist())


def test_merge_two_half_overlapping_constants():
    g = compute_grid((1, 1, 6), (1, 1, 4), (0, 0, 2))
    assert [o[2] for o in g.origins] == [0, 2]
    merged = merge_patches([np.full((1, 1, 1, 4), 0.2), np.full((1, 1, 1, 4), 0.6)], g)
    np.testing.assert_allclose(merged[0, 0, 0], [0.2, 0.2, 0.4, 0.4, 0.6, 0.6], atol=1e-15)


def test_merge_against_brute_force_sum_count():
    rng = np.random.default_rng(6)
    g = compute_grid((5, 7, 6), (3, 4, 4), (1, 2, 3))
    patches = [rng.random((2, 3, 4, 4)) for _ in g.origins]
    merged = merge_patches(patches, g)
    total = np.zeros((2, 5, 7, 6))
    count = np.zeros((5, 7, 6))
    for p, origin in zip(patches, g.origins):
        for idx in itertools.product(*[range(n) for n in g.patch_shape]):
            tgt = tuple(o + i for o, i in zip(origin, idx))
            total[(slice(None),) + tgt] += p[(slice(None),) + idx]
            count[tgt] += 1
    np.testing.assert_allclose(merged, total / count, rtol=0, atol=1e-15)


def test_merge_count_mismatch():
    g = compute_grid((4, 4, 4), (2, 2, 2))
    with pytest.raises(PatchCountMismatch):
        merge_patches([np.zeros((2, 2, 2, 2))], g)


@settings(max_examples=100, deadline=None)
@given(grid_specs(max_side=10), st.sampled_from([np.float32, np.float64]))
def test_round_trip_exact(spec, dtype):
    shape, patch, overlap = spec
    g = compute_grid(shape, patch, overlap)
    rng = np.random.default_rng(abs(hash(spec)) % 2**32)
    scores = rng.random((3,) + shape).astype(dtype)
    merged = merge_patches(extract_patches(scores, g), g)
    assert merged.shape == scores.shape
    assert np.array_equal(merged, scores)


def test_2d_grid_round_trip():
    rng = np.random.default_rng(0)
    s = rng.random((2, 9, 13))
    g = compute_grid((9, 13), (4, 5), (1, 2))
    np.testing.assert_array_equal(merge_patches(extract_patches(s, g), g), s)


def test_slice_2d():
    data = np.arange(48.0).reshape(3, 4, 4)
    v = Volume(data, (3.0, 2.0, 1.0))
    slices = slice_2d(v)
    assert len(slices) == 3 and slices[0].shape == (4, 4)
    assert slices[0].spacing == (2.0, 1.0)
    np.testing.assert_array_equal(np.stack([s.data for s in slices]), data)
    for k in range(3):
        np.testing.assert_array_equal(slices[k].data, data[k])
    labels = slice_2d(ClassMap(data.astype(int) % 3, (1, 1, 1), 3))
    assert all(isinstance(s, ClassMap) for s in labels)


def test_slice_2d_requires_3d():
    with pytest.raises(NotThreeDimensional):
        slice_2d(np.zeros((4, 4)))
