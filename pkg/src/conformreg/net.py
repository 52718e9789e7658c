"""Sine-activated coordinate network representing the deformation map.

The map is phi(p) = p + S u(n(p)) where n() is an affine normalisation
of the registration domain onto [-1, 1]^3, u is a small MLP with
sin(omega * linear) activations and a linear, zero-initialised output
layer, and S rescales the normalised displacement back to world (mm)
units.  Zero-initialising the last layer makes a fresh model the exact
identity map with spatial Jacobian I everywhere, so training starts
from a perfectly regular deformation.

Two input encoders are supported:

  periodic  the first trainable layer consumes the normalised point
            directly (the classic arrangement);
  fourier   the first sine layer is replaced by fixed random features
            [sin(2 pi B n(p)), cos(2 pi B n(p))] with B drawn once from
            a Gaussian and never trained.

`layers` counts trainable linear layers for the periodic encoder.  The
fourier encoder swaps the first of those for the fixed feature bank,
keeping the same depth of composition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NetConfig:
    layers: int = 4          # trainable linear layers (periodic encoder)
    hidden: int = 256
    omega: float = 32.0
    encoder: str = "periodic"      # "periodic" | "fourier"
    fourier_features: int = 128    # rows of B (fourier encoder only)
    fourier_sigma: float = 1.0

    def __post_init__(self):
        if self.layers < 2:
            raise ValueError("need at least two linear layers")
        if self.encoder not in ("periodic", "fourier"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.hidden < 1 or self.fourier_features < 1:
            raise ValueError("layer widths must be positive")
        if self.omega <= 0 or self.fourier_sigma <= 0:
            raise ValueError("omega and fourier_sigma must be positive")


@dataclass(frozen=True)
class NormTransform:
    """Affine map from world coordinates (mm) onto [-1, 1]^3."""

    center: np.ndarray
    half_extent: np.ndarray

    @classmethod
    def from_geometry(cls, dims, spacing, origin):
        dims = np.asarray(dims, dtype=np.float64)
        spacing = np.asarray(spacing, dtype=np.float64)
        origin = np.asarray(origin, dtype=np.float64)
        half = spacing * (dims - 1.0) / 2.0
        # a one-voxel axis has zero extent; fall back to 1 mm so the
        # normalisation stays invertible
        half = np.where(half > 0.0, half, 1.0)
        return cls(center=origin + spacing * (dims - 1.0) / 2.0, half_extent=half)

    def to_unit(self, p: np.ndarray) -> np.ndarray:
        return (p - self.center) / self.half_extent

    def scale_out(self, u: np.ndarray) -> np.ndarray:
        """Normalised displacement -> world displacement."""
        return u * self.half_extent


def _init_layers(cfg: NetConfig, rng: np.random.Generator):
    """Frequency-aware initialisation for sine activations.

    First layer U(-1/n_in, 1/n_in); hidden layers
    U(-sqrt(6/n_in)/omega, +sqrt(6/n_in)/omega); output layer zero so
    the network starts as the identity map.  Biases follow the usual
    U(-1/sqrt(n_in), +1/sqrt(n_in)) except the zeroed output.
    """
    if cfg.encoder == "periodic":
        widths = [3] + [cfg.hidden] * (cfg.layers - 1) + [3]
        first_trainable_is_input = True
    else:
        widths = [2 * cfg.fourier_features] + [cfg.hidden] * (cfg.layers - 2) + [3]
        first_trainable_is_input = False

    layers = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        if last:
            w = np.zeros((n_out, n_in))
            b = np.zeros(n_out)
        else:
            if i == 0 and first_trainable_is_input:
                bound = 1.0 / n_in
            else:
                bound = np.sqrt(6.0 / n_in) / cfg.omega
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
            b = rng.uniform(-1.0 / np.sqrt(n_in), 1.0 / np.sqrt(n_in), size=n_out)
        layers.append((w, b))
    return layers


class DeformationModel:
    """phi(p) = p + S u(n(p)) with u a sine MLP.  Pure numpy, float64."""

    def __init__(self, cfg: NetConfig, norm: NormTransform, rng=None, seed=0):
        self.cfg = cfg
        self.norm = norm
        rng = np.random.default_rng(seed) if rng is None else rng
        if cfg.encoder == "fourier":
            self.fourier_b = rng.standard_normal((cfg.fourier_features, 3)) * cfg.fourier_sigma
        else:
            self.fourier_b = None
        self.layers = _init_layers(cfg, rng)

    # -- parameters -------------------------------------------------------

    def parameters(self):
        """Trainable arrays in a fixed order (fourier B is not trainable)."""
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    def set_parameters(self, arrays):
        flat = list(arrays)
        if len(flat) != 2 * len(self.layers):
            raise ValueError("parameter list length mismatch")
        new = []
        for i, (w, b) in enumerate(self.layers):
            nw, nb = flat[2 * i], flat[2 * i + 1]
            if nw.shape != w.shape or nb.shape != b.shape:
                raise ValueError("parameter shape mismatch")
            new.append((np.asarray(nw, dtype=np.float64), np.asarray(nb, dtype=np.float64)))
        self.layers = new

    def parameter_count(self) -> int:
        return int(sum(w.size + b.size for w, b in self.layers))

    # -- forward ------------------------------------------------------------

    def _features(self, x):
        """Encoder output and its derivative w.r.t. the normalised point.

        Returns (feat (n, f), dfeat (3, n, f)); dfeat[d] = d feat / d x_d.
        """
        if self.fourier_b is None:
            n = x.shape[0]
            eye = np.broadcast_to(np.eye(3)[:, None, :], (3, n, 3))
            return x, eye
        ang = 2.0 * np.pi * (x @ self.fourier_b.T)  # (n, f)
        s, c = np.sin(ang), np.cos(ang)
        feat = np.concatenate([s, c], axis=1)
        # d ang / d x_d = 2 pi B[:, d]
        k = 2.0 * np.pi * self.fourier_b.T  # (3, f)
        dfeat = np.concatenate(
            [k[:, None, :] * c[None], -k[:, None, :] * s[None]], axis=2
        )
        return feat, dfeat

    def displacement(self, points: np.ndarray) -> np.ndarray:
        """World-unit displacement u at world points, shape (n, 3)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        z, _ = self._features(self.norm.to_unit(points))
        om = self.cfg.omega
        for w, b in self.layers[:-1]:
            z = np.sin(om * (z @ w.T + b))
        w, b = self.layers[-1]
        return self.norm.scale_out(z @ w.T + b)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return points + self.displacement(points)

    def spatial_jacobian(self, points: np.ndarray) -> np.ndarray:
        """d phi / d p at world points, shape (n, 3, 3), world units."""
        return self.forward_with_jacobian(points)[1]

    def forward_with_jacobian(self, points: np.ndarray):
        """(phi(points), d phi/d p) sharing one forward pass.

        The Jacobian is propagated forward alongside the activations:
        with G_l = d z_l / d x (x the normalised point) each sine layer
        maps G to omega * cos(omega a) * (G W^T).  G is carried as
        (3, n, width), one block per input axis, so the recursion is a
        single (3n, width) matrix product per layer.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        om = self.cfg.omega
        z, g = self._features(self.norm.to_unit(points))
        for w, b in self.layers[:-1]:
            a = z @ w.T + b
            chain = om * np.cos(om * a)  # (n, h)
            gw = np.matmul(g.reshape(3 * n, -1), w.T).reshape(3, n, -1)
            g = chain[None] * gw
            z = np.sin(om * a)
        w, b = self.layers[-1]
        u = z @ w.T + b
        du = np.matmul(g.reshape(3 * n, -1), w.T).reshape(3, n, 3)
        # du[d, i, j] = d u_j / d x_d; world Jacobian needs d phi_i / d p_j
        jn = du.transpose(1, 2, 0)  # (n, i, d)
        scale = self.norm.half_extent
        jac = np.eye(3) + jn * (scale[:, None] / scale[None, :])
        phi = points + self.norm.scale_out(u)
        return phi, jac

def displacement_lipschitz_bound(model: DeformationModel) -> float:
    """Upper bound on |u(p) - u(q)| / |p - q| in world units.

    Each sine layer is omega * |W|_2 Lipschitz; the bound is the product
    over layers times the output scaling, divided by the input scaling.
    For the fourier encoder the fixed feature bank contributes
    2 pi |[B; B]|_2.
    """
    lip = 1.0
    if model.fourier_b is not None:
        bb = np.vstack([model.fourier_b, model.fourier_b])
        lip *= 2.0 * np.pi * np.linalg.norm(bb, 2)
    for w, _ in model.layers[:-1]:
        lip *= model.cfg.omega * np.linalg.norm(w, 2)
    lip *= np.linalg.norm(model.layers[-1][0], 2)
    return float(lip * np.max(model.norm.half_extent) / np.min(model.norm.half_extent))
