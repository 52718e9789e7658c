"""Synthetic deformations and image pairs with known ground truth.

The oracle used to validate the whole pipeline: an analytic, smooth,
provably fold-free map phi*(p), an analytic band-limited texture f, and
the pair

    source voxel q:  f(q)
    target voxel p:  f(phi*(p))

so the exact registration from target to source coordinates is phi*
itself (up to the source volume's interpolation error).  Everything is
seeded and reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mat3 import det3
from .net import NormTransform
from .volume import Volume


@dataclass(frozen=True)
class SinusoidalField:
    """phi(p) = p + (amp/sqrt(3)) * sin(2 pi K n(p) + phase) per axis.

    n() maps the domain onto [-1, 1]^3, K is (3, 3) with row a holding
    the frequency of displacement axis a, so the displacement magnitude
    never exceeds amp.  Rows of K are scaled at construction to satisfy
    sum_b |2 pi amp K_ab / (sqrt(3) h_b)| <= margin < 1, which bounds
    the displacement Jacobian's row sums below 1 and hence keeps
    det(d phi/d p) positive everywhere: the map cannot fold.
    """

    amplitude: float
    freqs: np.ndarray      # (3, 3)
    phases: np.ndarray     # (3,)
    norm: NormTransform

    def displacement(self, points: np.ndarray) -> np.ndarray:
        x = self.norm.to_unit(np.atleast_2d(points))
        ang = 2.0 * np.pi * (x @ self.freqs.T) + self.phases
        return (self.amplitude / np.sqrt(3.0)) * np.sin(ang)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return points + self.displacement(points)

    def spatial_jacobian(self, points: np.ndarray) -> np.ndarray:
        """Alias matching the model interface, so fields drop into
        jacdet_grid and friends."""
        return self.jacobian(points)

    def jacobian(self, points: np.ndarray) -> np.ndarray:
        """Exact d phi / d p, shape (n, 3, 3)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        x = self.norm.to_unit(points)
        ang = 2.0 * np.pi * (x @ self.freqs.T) + self.phases
        co = np.cos(ang)  # (n, 3)
        k = 2.0 * np.pi * self.freqs / self.norm.half_extent[None, :]
        du = (self.amplitude / np.sqrt(3.0)) * co[:, :, None] * k[None, :, :]
        return np.eye(3) + du

    def fold_margin(self) -> float:
        """1 - (max row sum of |d u/d p|), positive for any field built
        by make_field.  A positive margin certifies det(d phi/d p) > 0
        everywhere: I + t Du stays invertible for t in [0, 1], so the
        determinant cannot cross zero on the way from det(I) = 1."""
        k = 2.0 * np.pi * np.abs(self.freqs) / self.norm.half_extent[None, :]
        s = (self.amplitude / np.sqrt(3.0)) * k.sum(axis=1)
        return float(1.0 - s.max())


def make_field(geometry, amplitude: float, seed: int = 0, margin: float = 0.9,
               kind: str = "sinusoidal") -> SinusoidalField:
    """Random fold-free deformation for a volume geometry.

    geometry is anything with dims/spacing/origin (a Volume works).
    Frequencies are drawn uniformly, then each row is rescaled onto the
    fold-free budget so the margin is tight and the field is as curly
    as the amplitude allows.
    """
    if kind != "sinusoidal":
        raise ValueError(f"unknown field kind {kind!r}")
    norm = NormTransform.from_geometry(geometry.dims, geometry.spacing, geometry.origin)
    rng = np.random.default_rng(seed)
    k = rng.uniform(0.3, 1.0, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3))
    # row budget: sum_b 2 pi amp |K_ab| / (sqrt(3) h_b) = margin
    w = 2.0 * np.pi * amplitude / np.sqrt(3.0) / norm.half_extent
    row = np.abs(k) @ w
    k = k * (margin / row)[:, None]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    return SinusoidalField(amplitude=float(amplitude), freqs=k, phases=phases, norm=norm)


@dataclass(frozen=True)
class SineTexture:
    """Band-limited scalar field: 0.5 + sum_m a_m sin(2 pi q.k_m + psi_m)."""

    waves: np.ndarray    # (m, 3) cycles per mm
    amps: np.ndarray     # (m,)
    phases: np.ndarray   # (m,)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        ang = 2.0 * np.pi * (points @ self.waves.T) + self.phases
        return 0.5 + np.sin(ang) @ self.amps


def make_texture(seed: int = 0, n_waves: int = 12, wavelengths=(6.0, 24.0),
                 contrast: float = 0.45) -> SineTexture:
    """Random smooth texture with wavelengths in the given mm range.

    Amplitudes are normalised so values stay within [0, 1] (sum of
    |a_m| = contrast <= 0.5), and every 5-ish-voxel window at typical
    spacings sees real intensity variation, which the windowed
    similarity needs.
    """
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    wl = np.exp(rng.uniform(np.log(wavelengths[0]), np.log(wavelengths[1]), n_waves))
    amps = rng.uniform(0.5, 1.0, n_waves)
    amps *= contrast / amps.sum()
    return SineTexture(waves=dirs / wl[:, None], amps=amps,
                       phases=rng.uniform(0, 2 * np.pi, n_waves))


def make_pair(dims, spacing, origin, field, texture) -> tuple:
    """(source, target) Volumes whose exact target->source map is `field`.

    The source volume holds the texture itself; the target holds the
    texture pulled back through the field, so intensity at target p
    equals source intensity at phi*(p).  Full-domain masks.
    """
    shape = tuple(int(d) for d in dims)
    probe = Volume(np.zeros(shape), spacing, origin)
    pts = probe.grid_points()
    src = Volume(texture(pts).reshape(shape), spacing, origin)
    tgt = Volume(texture(field(pts)).reshape(shape), spacing, origin)
    return src, tgt
