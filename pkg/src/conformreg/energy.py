"""Pointwise stored-energy density for the deformation regulariser.

For a spatial Jacobian J with d = det J the density is

    W(J) = a1 * |J|_F^9 / d^3          (length distortion)
         + a2 * |cof J|_F^6 / d^4      (area distortion)
         + a3 * (d - 1)^2              (volume change)
         + a4 / d^alpha                (compression barrier)
         - a1 * 3^4.5 - a2 * 27 - a4   (so W(identity) = 0)

The first two terms are conformally invariant: J -> c R J with c > 0
and R a rotation leaves them unchanged, and on J = c R itself they sit
exactly at their minima a1 * 3^4.5 and a2 * 27.

The density is only meaningful for d > 0.  Instead of an infinite
penalty for d <= eps_det, every d-dependent factor is replaced below
eps_det by its first-order Taylor expansion in d around eps_det.  The
result is C^1 in J across the switch, finite for any J, and grows
linearly as d -> -inf, which keeps optimisation steps that momentarily
fold a point recoverable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mat3 import cof3, cross3, det3, frob2


@dataclass(frozen=True)
class EnergyParams:
    a1: float = 1.0
    a2: float = 1.0
    a3: float = 1.0
    a4: float = 1.0
    alpha: float = 2.0
    eps_det: float = 1e-6

    def __post_init__(self):
        if min(self.a1, self.a2, self.a3, self.a4) < 0:
            raise ValueError("energy coefficients must be non-negative")
        if self.alpha <= 0 or self.eps_det <= 0:
            raise ValueError("alpha and eps_det must be positive")


# W(I) = 0 requires subtracting the value of the raw terms at J = I
_C1 = 3.0**4.5  # |I|_F^9 / det(I)^3


def _d_factors(d: np.ndarray, p: EnergyParams):
    """The four scalar d-dependent factors, linearised below eps_det.

    Returns (g1, g2, g3, g4) with, on the smooth branch,
    g1 = d^-3, g2 = d^-4, g3 = (d-1)^2, g4 = d^-alpha.
    """
    e = p.eps_det
    safe = np.where(d > e, d, e)  # keep the smooth formulas NaN-free
    dd = d - e

    g1 = np.where(d > e, safe**-3.0, e**-3.0 - 3.0 * dd * e**-4.0)
    g2 = np.where(d > e, safe**-4.0, e**-4.0 - 4.0 * dd * e**-5.0)
    g3 = np.where(d > e, (safe - 1.0) ** 2, (e - 1.0) ** 2 + 2.0 * (e - 1.0) * dd)
    g4 = np.where(
        d > e,
        safe**-p.alpha,
        e**-p.alpha - p.alpha * dd * e ** -(p.alpha + 1.0),
    )
    return g1, g2, g3, g4


def density_terms(jac: np.ndarray, params: EnergyParams = EnergyParams()):
    """The four density terms separately, each normalised to 0 at J = I.

    Returns a dict with keys "length", "area", "volume", "barrier";
    their sum equals density().
    """
    jac = np.asarray(jac, dtype=np.float64)
    d = det3(jac)
    f2 = frob2(jac)
    g2c = frob2(cof3(jac))
    g1, g2, g3, g4 = _d_factors(d, params)
    return {
        "length": params.a1 * (f2**4.5 * g1 - _C1),
        "area": params.a2 * (g2c**3.0 * g2 - 27.0),
        "volume": params.a3 * g3,
        "barrier": params.a4 * (g4 - 1.0),
    }


def density(jac: np.ndarray, params: EnergyParams = EnergyParams()) -> np.ndarray:
    """Stored-energy density W(J) for a batch of Jacobians (..., 3, 3)."""
    t = density_terms(jac, params)
    return t["length"] + t["area"] + t["volume"] + t["barrier"]


def density_grad(jac: np.ndarray, params: EnergyParams = EnergyParams()):
    """Density and its analytic gradient dW/dJ, shapes (...,) and (..., 3, 3).

    Uses d det/dJ = cof J and, for the area term, the tensor cross
    product identity d|cof J|^2/dJ = 2 cross3(J, cof J).
    """
    jac = np.asarray(jac, dtype=np.float64)
    p = params
    e = p.eps_det

    d = det3(jac)
    c = cof3(jac)
    f2 = frob2(jac)
    g2c = frob2(c)
    f9 = f2**4.5
    f7 = f2**3.5
    g6c = g2c**3.0
    g4c = g2c**2.0

    g1, g2, g3, g4 = _d_factors(d, p)
    w = p.a1 * (f9 * g1 - _C1) + p.a2 * (g6c * g2 - 27.0) + p.a3 * g3 + p.a4 * (g4 - 1.0)

    # dP/dJ for the two d-independent polynomial factors
    dp1 = (9.0 * p.a1) * f7[..., None, None] * jac
    dp2 = (6.0 * p.a2) * g4c[..., None, None] * cross3(jac, c)

    # d(g_i)/dd on each branch; below eps_det the factors are linear in d
    smooth = d > e
    safe = np.where(smooth, d, e)
    dg1 = np.where(smooth, -3.0 * safe**-4.0, -3.0 * e**-4.0)
    dg2 = np.where(smooth, -4.0 * safe**-5.0, -4.0 * e**-5.0)
    dg3 = np.where(smooth, 2.0 * (safe - 1.0), 2.0 * (e - 1.0))
    dg4 = np.where(smooth, -p.alpha * safe ** -(p.alpha + 1.0), -p.alpha * e ** -(p.alpha + 1.0))

    ddensity_dd = p.a1 * f9 * dg1 + p.a2 * g6c * dg2 + p.a3 * dg3 + p.a4 * dg4

    grad = dp1 * g1[..., None, None] + dp2 * g2[..., None, None] + ddensity_dd[..., None, None] * c
    return w, grad
