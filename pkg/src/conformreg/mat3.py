"""Batched 3x3 matrix helpers.

All functions accept arrays of shape (..., 3, 3) and operate on the
trailing two axes, so a batch of Jacobians with shape (n, 3, 3) goes
through in one call.  Everything is float64 and allocation-light; these
sit on the hot path of both the energy evaluation and its gradient.
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.eye(3)


def det3(a: np.ndarray) -> np.ndarray:
    """Determinant of a batch of 3x3 matrices, shape (...,)."""
    a = np.asarray(a)
    return (
        a[..., 0, 0] * (a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1])
        - a[..., 0, 1] * (a[..., 1, 0] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 0])
        + a[..., 0, 2] * (a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0])
    )


def cross3(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Tensor cross product of 3x3 matrices.

    (x # y)_ij = eps_iab eps_jcd x_ac y_bd, summed over a,b,c,d.  It is
    symmetric in (x, y), bilinear, and ties determinant, cofactor and
    their derivatives together:

        cof(a)        = 0.5 * cross3(a, a)
        d cof(a)[e]   = cross3(a, e)            (directional derivative)
        d det(a)[e]   = trace(cof(a)^T e)

    The map e -> cross3(a, e) is self-adjoint under the Frobenius inner
    product, so it is its own transpose when pulling gradients back.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    out = np.empty(np.broadcast_shapes(x.shape, y.shape), dtype=np.result_type(x, y, np.float64))
    # row i of the result only mixes rows != i of x and y; same for columns
    for i in range(3):
        a, b = (i + 1) % 3, (i + 2) % 3
        for j in range(3):
            c, d = (j + 1) % 3, (j + 2) % 3
            out[..., i, j] = (
                x[..., a, c] * y[..., b, d]
                + x[..., b, d] * y[..., a, c]
                - x[..., a, d] * y[..., b, c]
                - x[..., b, c] * y[..., a, d]
            )
    return out


def cof3(a: np.ndarray) -> np.ndarray:
    """Cofactor matrix: cof(a)_ij = signed minor of a_ij.  Equals det(a) a^-T
    for invertible a, but stays finite and polynomial everywhere."""
    return 0.5 * cross3(a, a)


def frob2(a: np.ndarray) -> np.ndarray:
    """Squared Frobenius norm over the trailing two axes."""
    a = np.asarray(a)
    return np.einsum("...ij,...ij->...", a, a)


def frob(a: np.ndarray) -> np.ndarray:
    return np.sqrt(frob2(a))


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """n random rotation matrices, Haar-uniform, via QR of Gaussian samples."""
    g = rng.standard_normal((n, 3, 3))
    q, r = np.linalg.qr(g)
    # normalise the QR sign convention, then flip one column where det = -1
    sign = np.sign(np.einsum("nii->ni", r))
    sign[sign == 0] = 1.0
    q = q * sign[:, None, :]
    negdet = det3(q) < 0
    q[negdet, :, 0] *= -1.0
    return q
