import numpy as np
import pytest

from conformreg.mat3 import det3
from conformreg.synth import (SinusoidalField, make_field, make_pair,
                              make_texture)
from conformreg.volume import Volume

from conftest import texture_volume


GEO = texture_volume(dims=(24, 20, 28), spacing=(1.0, 1.5, 0.8))


def dense_probe(vol, per_axis=9, pad=0.3):
    lo, hi = vol.world_bounds()
    axes = [np.linspace(lo[a] - pad, hi[a] + pad, per_axis) for a in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([c.ravel() for c in g], axis=1)


def test_field_displacement_bounded_by_amplitude():
    for seed in range(5):
        field = make_field(GEO, amplitude=4.0, seed=seed)
        u = field.displacement(dense_probe(GEO))
        assert np.max(np.linalg.norm(u, axis=1)) <= 4.0 + 1e-12
        # each axis individually stays below amp/sqrt(3)
        assert np.max(np.abs(u)) <= 4.0 / np.sqrt(3.0) + 1e-12


def test_field_jacobian_matches_finite_differences():
    field = make_field(GEO, amplitude=3.0, seed=1)
    pts = dense_probe(GEO, per_axis=5)
    jac = field.jacobian(pts)
    assert np.array_equal(jac, field.spatial_jacobian(pts))
    h = 1e-6
    for ax in range(3):
        d = np.zeros(3)
        d[ax] = h
        fd = (field(pts + d) - field(pts - d)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, ax], fd, rtol=1e-6, atol=1e-8)


def test_fold_margin_certifies_positive_determinant():
    for seed in range(8):
        field = make_field(GEO, amplitude=6.0, seed=seed, margin=0.9)
        m = field.fold_margin()
        assert m > 0.0
        dets = det3(field.jacobian(dense_probe(GEO, per_axis=13)))
        assert np.all(dets > 0.0)
        # the margin really is 1 - max row sum, which caps |det - 1|
        assert np.min(dets) >= (1.0 - (1.0 - m)) ** 3 - 1e-12


def test_margin_budget_is_tight():
    field = make_field(GEO, amplitude=5.0, seed=3, margin=0.8)
    np.testing.assert_allclose(field.fold_margin(), 1.0 - 0.8, rtol=1e-12)
    # every row uses its full budget, not just the worst one
    k = 2.0 * np.pi * np.abs(field.freqs) / field.norm.half_extent[None, :]
    rows = (field.amplitude / np.sqrt(3.0)) * k.sum(axis=1)
    np.testing.assert_allclose(rows, 0.8, rtol=1e-12)


def test_field_is_reproducible_and_seed_sensitive():
    f1 = make_field(GEO, amplitude=2.0, seed=9)
    f2 = make_field(GEO, amplitude=2.0, seed=9)
    f3 = make_field(GEO, amplitude=2.0, seed=10)
    assert np.array_equal(f1.freqs, f2.freqs) and np.array_equal(f1.phases, f2.phases)
    assert not np.array_equal(f1.freqs, f3.freqs)
    with pytest.raises(ValueError):
        make_field(GEO, amplitude=2.0, kind="polynomial")


def test_texture_range_and_band_limits():
    tex = make_texture(seed=4, wavelengths=(5.0, 15.0), contrast=0.45)
    vals = tex(dense_probe(GEO, per_axis=17))
    assert np.all(vals >= 0.05) and np.all(vals <= 0.95)
    wl = 1.0 / np.linalg.norm(tex.waves, axis=1)
    assert np.all(wl >= 5.0) and np.all(wl <= 15.0)
    assert tex.amps.sum() == pytest.approx(0.45)


def test_pair_encodes_field_exactly():
    field = make_field(GEO, amplitude=2.5, seed=6)
    tex = make_texture(seed=7)
    source, target = make_pair(GEO.dims, GEO.spacing, GEO.origin, field, tex)
    assert source.data.shape == tuple(GEO.dims)
    pts = target.grid_points()
    # target voxel p holds the texture at phi*(p), bitwise
    np.testing.assert_array_equal(target.data.ravel(), tex(field(pts)))
    np.testing.assert_array_equal(source.data.ravel(), tex(pts))
    # pulling source through the true map reproduces the target up to
    # source-grid interpolation error, for warps that stay on the grid
    warped = field(pts)
    lo, hi = source.world_bounds()
    inside = np.all((warped >= lo) & (warped <= hi), axis=1)
    recon = source.sample(warped)
    err = np.abs(recon - target.data.ravel())
    assert np.max(err[inside]) < 0.05
    assert np.mean(err[inside]) < 0.01


def test_field_drops_into_model_slots():
    """Fields expose __call__/displacement/spatial_jacobian with model
    shapes, so evaluation code accepts either."""
    field = make_field(GEO, amplitude=1.0, seed=2)
    p = np.array([5.0, 6.0, 7.0])
    assert field(p).shape == (1, 3)
    assert field.displacement(p).shape == (1, 3)
    assert field.spatial_jacobian(p).shape == (1, 3, 3)
