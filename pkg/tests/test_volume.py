import numpy as np
import pytest

from conformreg.errors import DataError
from conformreg.volume import Volume

from conftest import texture_volume


def make_affine_volume(dims=(9, 7, 11), spacing=(1.0, 2.0, 0.5), origin=(3.0, -1.0, 2.0),
                       coeffs=(0.7, -1.3, 0.4), offset=5.0):
    """f(p) = offset + coeffs . p sampled on the grid; trilinear
    interpolation reproduces an affine function exactly inside the grid."""
    vol = Volume(np.zeros(dims), spacing, origin)
    pts = vol.grid_points()
    vals = offset + pts @ np.asarray(coeffs)
    return Volume(vals.reshape(dims), spacing, origin), np.asarray(coeffs), offset


def test_sampling_is_exact_on_affine_functions():
    vol, coeffs, offset = make_affine_volume()
    rng = np.random.default_rng(0)
    lo, hi = vol.world_bounds()
    pts = rng.uniform(lo, hi, (300, 3))
    val, grad = vol.sample_with_gradient(pts)
    np.testing.assert_allclose(val, offset + pts @ coeffs, rtol=1e-12)
    np.testing.assert_allclose(grad, np.broadcast_to(coeffs, (300, 3)), rtol=1e-10)


def test_sampling_hits_voxel_centers_exactly():
    vol = texture_volume(dims=(8, 9, 10))
    pts = vol.grid_points()
    np.testing.assert_allclose(vol.sample(pts), vol.data.ravel(), rtol=1e-13)


def test_gradient_matches_finite_differences(textured):
    lo, hi = textured.world_bounds()
    rng = np.random.default_rng(1)
    # keep a margin so the FD stencil never crosses the clamp boundary
    pts = rng.uniform(lo + 1.0, hi - 1.0, (200, 3))
    # nudge off cell faces where the interpolant is only C^0
    vox = textured.world_to_voxel(pts)
    frac = vox - np.floor(vox)
    pts = pts + np.where(frac < 0.02, 0.05, np.where(frac > 0.98, -0.05, 0.0)) \
        * textured.spacing
    grad = textured.sample_gradient(pts)
    h = 1e-6
    for ax in range(3):
        shift = np.zeros(3)
        shift[ax] = h
        fd = (textured.sample(pts + shift) - textured.sample(pts - shift)) / (2 * h)
        np.testing.assert_allclose(grad[:, ax], fd, rtol=1e-5, atol=1e-6)


def test_out_of_bounds_clamps_and_zeroes_gradient(textured):
    lo, hi = textured.world_bounds()
    out = np.array([
        [lo[0] - 5.0, lo[1] + 3.0, lo[2] + 3.0],   # off the low-x side only
        [hi[0] + 2.0, hi[1] + 2.0, lo[2] + 3.0],   # off two sides
    ])
    val, grad = textured.sample_with_gradient(out)
    clamped = np.clip(out, lo, hi)
    np.testing.assert_allclose(val, textured.sample(clamped), rtol=1e-13)
    assert grad[0, 0] == 0.0 and np.any(grad[0, 1:] != 0.0)
    assert grad[1, 0] == 0.0 and grad[1, 1] == 0.0 and grad[1, 2] != 0.0


def test_world_voxel_round_trip():
    vol = texture_volume(dims=(6, 6, 6), spacing=(1.5, 1.0, 2.0))
    idx = np.array([[0.0, 0.0, 0.0], [2.5, 3.0, 1.25]])
    np.testing.assert_allclose(vol.world_to_voxel(vol.voxel_to_world(idx)), idx, rtol=1e-14)


def test_masked_sampling_stays_inside_mask(textured):
    mask = np.zeros(textured.data.shape, dtype=bool)
    mask[5:9, 2:6, 10:14] = True
    vol = Volume(textured.data, textured.spacing, textured.origin, mask=mask)
    rng = np.random.default_rng(2)
    pts = vol.sample_points(500, rng)
    vox = vol.world_to_voxel(pts)
    # jitter is at most half a voxel, so rounding recovers the mask voxel
    idx = np.rint(vox).astype(int)
    assert np.all(mask[idx[:, 0], idx[:, 1], idx[:, 2]])
    # without jitter the draws are exactly voxel centers
    centers = vol.sample_points(100, np.random.default_rng(3), jitter=False)
    v = vol.world_to_voxel(centers)
    np.testing.assert_allclose(v, np.rint(v), atol=1e-12)


def test_masked_indices_lexicographic_and_empty_mask_raises(textured):
    idx = textured.masked_indices()
    assert idx.shape == (textured.data.size, 3)
    as_flat = np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]), textured.data.shape)
    assert np.array_equal(as_flat, np.arange(textured.data.size))
    empty = Volume(textured.data, textured.spacing, textured.origin,
                   mask=np.zeros(textured.data.shape, dtype=bool))
    with pytest.raises(DataError):
        empty.masked_indices()


def test_grid_points_order_matches_ravel(textured):
    pts = textured.grid_points()
    assert pts.shape == (textured.data.size, 3)
    # first point is the origin, second advances the k (fastest) index
    np.testing.assert_allclose(pts[0], textured.origin)
    np.testing.assert_allclose(pts[1] - pts[0], [0, 0, textured.spacing[2]])


def test_normalized_range_and_inversion(textured):
    norm, lo, hi = textured.normalized()
    assert norm.data.min() == 0.0 and norm.data.max() == 1.0
    np.testing.assert_allclose(norm.data * (hi - lo) + lo, textured.data, rtol=1e-12)
    flat = Volume(np.full((4, 4, 4), 2.5), (1, 1, 1), (0, 0, 0))
    with pytest.raises(DataError):
        flat.normalized()


def test_validation_errors():
    with pytest.raises(DataError):
        Volume(np.zeros((4, 4)), (1, 1, 1), (0, 0, 0))
    with pytest.raises(DataError):
        Volume(np.zeros((4, 4, 4)), (1, 0, 1), (0, 0, 0))
    with pytest.raises(DataError):
        Volume(np.zeros((4, 4, 4)), (1, 1, 1), (0, 0, 0), mask=np.ones((2, 2, 2), bool))
