"""Regular-grid scalar volumes with trilinear interpolation.

Geometry convention: voxel (i, j, k) has its center at
origin + spacing * (i, j, k) in world (mm) coordinates, data is indexed
data[i, j, k], and all world-facing arrays are float64.  Sampling
outside the grid clamps to the boundary voxel, which makes the
interpolant constant along an axis once the point leaves the grid on
that axis; the analytic gradient is zero there accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError


@dataclass
class Volume:
    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DataError(f"volume data must be 3-d, got shape {self.data.shape}")
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if np.any(self.spacing <= 0):
            raise DataError(f"spacing must be positive, got {self.spacing}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape:
                raise DataError(
                    f"mask shape {self.mask.shape} != data shape {self.data.shape}"
                )

    @property
    def dims(self) -> np.ndarray:
        return np.asarray(self.data.shape)

    def world_bounds(self):
        """(lower, upper) corners of the voxel-center bounding box."""
        return self.origin.copy(), self.origin + self.spacing * (self.dims - 1)

    def world_to_voxel(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.origin) / self.spacing

    def voxel_to_world(self, idx: np.ndarray) -> np.ndarray:
        return self.origin + np.atleast_2d(idx) * self.spacing

    # -- interpolation -----------------------------------------------------

    def _corners(self, points):
        v = self.world_to_voxel(np.asarray(points, dtype=np.float64))
        dims = self.dims
        oob = (v < 0.0) | (v > dims - 1.0)  # per-axis, pre-clamp
        vc = np.clip(v, 0.0, dims - 1.0)
        i0 = np.clip(np.floor(vc).astype(np.intp), 0, np.maximum(dims - 2, 0))
        i1 = np.minimum(i0 + 1, dims - 1)
        f = vc - i0
        d = self.data
        x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
        x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
        c = (
            d[x0, y0, z0], d[x1, y0, z0], d[x0, y1, z0], d[x1, y1, z0],
            d[x0, y0, z1], d[x1, y0, z1], d[x0, y1, z1], d[x1, y1, z1],
        )
        return c, f, oob

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation at world points, shape (n,)."""
        return self.sample_with_gradient(points)[0]

    def sample_gradient(self, points: np.ndarray) -> np.ndarray:
        """Gradient of sample() w.r.t. world coordinates, shape (n, 3).

        Matches central finite differences away from cell faces; on a
        face the slope of the cell the clamped point lands in is used.
        Zero along axes where the point is outside the grid, because
        clamping makes the interpolant constant there.
        """
        return self.sample_with_gradient(points)[1]

    def sample_with_gradient(self, points: np.ndarray):
        (c000, c100, c010, c110, c001, c101, c011, c111), f, oob = self._corners(points)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz

        c00 = c000 * gx + c100 * fx
        c10 = c010 * gx + c110 * fx
        c01 = c001 * gx + c101 * fx
        c11 = c011 * gx + c111 * fx
        c0 = c00 * gy + c10 * fy
        c1 = c01 * gy + c11 * fy
        val = c0 * gz + c1 * fz

        dx = ((c100 - c000) * gy + (c110 - c010) * fy) * gz \
            + ((c101 - c001) * gy + (c111 - c011) * fy) * fz
        dy = (c10 - c00) * gz + (c11 - c01) * fz
        dz = c1 - c0
        grad = np.stack([dx, dy, dz], axis=1) / self.spacing
        grad[oob] = 0.0
        return val, grad

    # -- masks and batches ---------------------------------------------------

    def effective_mask(self) -> np.ndarray:
        if self.mask is not None:
            return self.mask
        return np.ones(self.data.shape, dtype=bool)

    def masked_indices(self) -> np.ndarray:
        """Integer (n, 3) indices of mask voxels, lexicographic order."""
        idx = np.argwhere(self.effective_mask())
        if idx.shape[0] == 0:
            raise DataError("mask selects no voxels")
        return idx

    def sample_points(self, count: int, rng: np.random.Generator, jitter=True) -> np.ndarray:
        """Draw world points uniformly over mask voxels.

        Each point is a mask voxel center plus, when jitter is on, a
        uniform sub-voxel offset in [-1/2, 1/2) voxels per axis, so the
        batch explores the continuous domain rather than the lattice.
        """
        idx = self.masked_indices()
        pick = rng.integers(0, idx.shape[0], size=count)
        pts = idx[pick].astype(np.float64)
        if jitter:
            pts += rng.uniform(-0.5, 0.5, size=(count, 3))
        return self.voxel_to_world(pts)

    def grid_points(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (n_voxels, 3),
        lexicographic in (i, j, k)."""
        nx, ny, nz = self.data.shape
        ii, jj, kk = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
        return self.voxel_to_world(idx.astype(np.float64))

    # -- intensity normalisation ---------------------------------------------

    def normalized(self):
        """Linearly rescale intensities to [0, 1] over the mask interior.

        Returns (volume, lo, hi) with the original range recoverable as
        data * (hi - lo) + lo.  The mask carries over.
        """
        m = self.effective_mask()
        lo = float(self.data[m].min())
        hi = float(self.data[m].max())
        if not np.isfinite([lo, hi]).all() or hi <= lo:
            raise DataError("cannot normalise: constant or non-finite intensities in mask")
        out = (self.data - lo) / (hi - lo)
        return Volume(out, self.spacing.copy(), self.origin.copy(), mask=self.mask), lo, hi
