"""Registration quality measures: landmark error and Jacobian fields.

Landmark conventions follow the common thoracic CT benchmarks: points
come as voxel indices (continuous values allowed), 1-based by default,
and turn into world coordinates as origin + (index - base) * spacing.
The registration error of a pair is the Euclidean mm distance between
the model-mapped target landmark and its source landmark.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .mat3 import det3
from .volume import Volume

_JAC_CHUNK = 65536


def landmarks_to_world(indices, spacing, origin=(0.0, 0.0, 0.0), index_base: float = 1.0):
    """Continuous voxel indices (n, 3) -> world coordinates (n, 3)."""
    indices = np.atleast_2d(np.asarray(indices, dtype=np.float64))
    if indices.ndim != 2 or indices.shape[1] != 3:
        raise DataError(f"landmarks must be (n, 3), got {indices.shape}")
    spacing = np.asarray(spacing, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    return origin + (indices - index_base) * spacing


def tre(model, landmarks_target, landmarks_source, spacing,
        origin=(0.0, 0.0, 0.0), index_base: float = 1.0):
    """Target registration error in mm.

    model maps target world coordinates to source world coordinates;
    pass model=None for the identity baseline.  Landmarks are voxel
    indices sharing one spacing/origin/base convention.  Returns
    (mean, per_landmark) with per_landmark shape (n,).
    """
    pt = landmarks_to_world(landmarks_target, spacing, origin, index_base)
    ps = landmarks_to_world(landmarks_source, spacing, origin, index_base)
    if pt.shape != ps.shape:
        raise DataError(f"landmark counts differ: {pt.shape[0]} vs {ps.shape[0]}")
    mapped = pt if model is None else model(pt)
    err = np.linalg.norm(mapped - ps, axis=1)
    return float(err.mean()), err


def jacdet_grid(model, geometry):
    """det(d phi/d p) at every voxel center of a geometry.

    geometry is anything with dims/spacing/origin (a Volume works).
    Returns (volume, stats) where volume holds the determinant field
    and stats has min/max/mean/negative_fraction over all voxels.
    """
    probe = Volume(np.zeros(tuple(int(d) for d in geometry.dims)),
                   geometry.spacing, geometry.origin)
    pts = probe.grid_points()
    dets = np.empty(pts.shape[0])
    for a in range(0, pts.shape[0], _JAC_CHUNK):
        sl = slice(a, min(a + _JAC_CHUNK, pts.shape[0]))
        dets[sl] = det3(model.spatial_jacobian(pts[sl]))
    stats = {
        "min": float(dets.min()),
        "max": float(dets.max()),
        "mean": float(dets.mean()),
        "negative_fraction": float(np.count_nonzero(dets <= 0.0) / dets.size),
    }
    vol = Volume(dets.reshape(probe.data.shape), geometry.spacing, geometry.origin)
    return vol, stats


def endpoint_errors(model, reference, points: np.ndarray) -> np.ndarray:
    """|model(p) - reference(p)| per point, in mm.

    reference is any callable mapping (n, 3) -> (n, 3); pass the true
    synthetic field to measure recovery, or None for the identity (the
    initial error)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ref = points if reference is None else reference(points)
    out = np.empty(points.shape[0])
    for a in range(0, points.shape[0], _JAC_CHUNK):
        sl = slice(a, min(a + _JAC_CHUNK, points.shape[0]))
        out[sl] = np.linalg.norm(model(points[sl]) - ref[sl], axis=1)
    return out


def warp_volume(model, source: Volume, geometry) -> Volume:
    """Resample the source through the deformation onto a target grid.

    Output voxel p gets source.sample(model(p)); out-of-bounds warps
    clamp like any other sample.  model=None resamples the source onto
    the geometry unchanged."""
    probe = Volume(np.zeros(tuple(int(d) for d in geometry.dims)),
                   geometry.spacing, geometry.origin)
    pts = probe.grid_points()
    vals = np.empty(pts.shape[0])
    for a in range(0, pts.shape[0], _JAC_CHUNK):
        sl = slice(a, min(a + _JAC_CHUNK, pts.shape[0]))
        q = pts[sl] if model is None else model(pts[sl])
        vals[sl] = source.sample(q)
    return Volume(vals.reshape(probe.data.shape), geometry.spacing, geometry.origin)
