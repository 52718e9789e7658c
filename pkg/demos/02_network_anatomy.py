"""Poke at the deformation network: identity start, encoders, Jacobians.

A fresh model is the exact identity map (the final layer is
zero-initialised), so registration always starts from "no deformation".
The analytic spatial Jacobian is forward-mode and matches finite
differences to near machine precision.
"""

import numpy as np

from conformreg.mat3 import det3
from conformreg.net import DeformationModel, NetConfig, NormTransform

dims, spacing, origin = (48, 48, 32), (1.0, 1.0, 2.0), (-10.0, 0.0, 5.0)
norm = NormTransform.from_geometry(dims, spacing, origin)

model = DeformationModel(NetConfig(layers=3, hidden=64, omega=16.0), norm, seed=0)

rng = np.random.default_rng(1)
pts = origin + rng.uniform(0.0, 1.0, (5, 3)) * (np.array(dims) - 1) * spacing

# identity start, bitwise
phi, jac = model.forward_with_jacobian(pts)
print("fresh model is identity: ", bool(np.array_equal(phi, pts)))
print("fresh Jacobian det == 1:  ", bool(np.array_equal(det3(jac), np.ones(5))))

# perturb the final layer so there is an actual displacement field
w, b = model.layers[-1]
model.layers[-1] = (0.05 * rng.standard_normal(w.shape), b)

u = model.displacement(pts)
print("\ndisplacement magnitudes (mm):", np.linalg.norm(u, axis=1).round(3))

# analytic vs finite-difference Jacobian
jac = model.spatial_jacobian(pts)
h = 1e-5
fd = np.empty_like(jac)
for ax in range(3):
    step = np.zeros(3)
    step[ax] = h
    fd[:, :, ax] = (model(pts + step) - model(pts - step)) / (2 * h)
relerr = np.abs(jac - fd).max() / np.abs(fd).max()
print(f"jacobian vs central differences: rel err {relerr:.2e}")
print("dets:", det3(jac).round(5))

# the fourier encoder front-loads a fixed sinusoid bank; everything
# downstream is the same sine stack
fmodel = DeformationModel(
    NetConfig(layers=3, hidden=64, encoder="fourier", fourier_features=24),
    norm, seed=0)
print("\nfourier model widths:", [wt.shape for wt, _ in fmodel.layers])
print("bank shape:", fmodel.fourier_b.shape,
      " trained params:", sum(a.size for a in fmodel.parameters()))
