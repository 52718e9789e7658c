"""Walk the stored-energy density over simple deformation families.

Shows the three properties the energy is built around: it vanishes on
the identity, it is blind to rotation and isotropic scaling in its
distortion terms, and it blows up as a deformation approaches a fold.
"""

import numpy as np

from conformreg.energy import EnergyParams, density, density_terms
from conformreg.mat3 import det3, random_rotations

p = EnergyParams()

print("identity:", float(density(np.eye(3), p)))

# similarity transforms cR: the two distortion terms stay at their
# identity values no matter the rotation or the scale
rng = np.random.default_rng(0)
rots = random_rotations(5, rng)
for c in (0.5, 1.0, 2.0):
    t = density_terms(c * rots, p)
    print(f"c={c:3.1f}  length term {t['length'].max():+.2e}  "
          f"area term {t['area'].max():+.2e}  "
          f"volume term {t['volume'].mean():.4f}")

# pure volume change along diag(s, s, s): only the volumetric and
# barrier terms move
print("\nisotropic scaling s:")
for s in (0.6, 0.8, 1.0, 1.25, 1.6):
    j = np.diag([s, s, s])
    t = density_terms(j, p)
    print(f"  s={s:5.2f}  det={det3(j):6.3f}  "
          f"volume {float(t['volume']):8.4f}  barrier {float(t['barrier']):8.4f}")

# anisotropic stretch diag(s, 1/s, 1) keeps det = 1: the volumetric
# terms stay at zero while distortion grows
print("\nvolume-preserving shear s:")
for s in (1.0, 1.2, 1.5, 2.0):
    j = np.diag([s, 1.0 / s, 1.0])
    t = density_terms(j, p)
    print(f"  s={s:4.2f}  length {float(t['length']):9.4f}  "
          f"area {float(t['area']):9.4f}  volume {float(t['volume']):.1e}")

# approach to a fold: density diverges as det -> 0+, and the Taylor
# extension keeps it finite (and steep) at and below zero
print("\ncompression toward a fold, diag(s, 1, 1):")
for s in (0.5, 0.1, 1e-2, 1e-4, 1e-6, 0.0, -0.1):
    w = float(density(np.diag([s, 1.0, 1.0]), p))
    print(f"  s={s:8.1e}  W={w:12.4e}")
