"""Detect folding through the Jacobian determinant field.

A deformation folds where det(d phi/d p) <= 0: the map is locally
orientation-reversing and no longer invertible.  The synthetic field
generator budgets its frequencies so folding is impossible; a net with
a recklessly scaled final layer shows what a folded field looks like.
"""

import numpy as np

from conformreg.evaluation import jacdet_grid
from conformreg.net import DeformationModel, NetConfig, NormTransform
from conformreg.synth import make_field
from conformreg.volume import Volume

dims, spacing, origin = (40, 40, 40), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)
probe = Volume(np.zeros(dims), spacing, origin)


def report(tag, stats):
    print(f"{tag:24s} det range [{stats['min']:8.3f}, {stats['max']:8.3f}]  "
          f"mean {stats['mean']:6.3f}  negative {stats['negative_fraction']:.4f}")


# guaranteed fold-free: the frequency rows are rescaled so the total
# distortion budget stays below 1
field = make_field(probe, amplitude=6.0, seed=2)
_, stats = jacdet_grid(field, probe)
report(f"synthetic (margin {field.fold_margin():.2f})", stats)

# a fresh model is the identity: det == 1 everywhere
norm = NormTransform.from_geometry(dims, spacing, origin)
model = DeformationModel(NetConfig(layers=3, hidden=64, omega=16.0), norm, seed=3)
_, stats = jacdet_grid(model, probe)
report("fresh model", stats)

# scale the final layer far past anything training would produce
rng = np.random.default_rng(4)
w, b = model.layers[-1]
model.layers[-1] = (0.8 * rng.standard_normal(w.shape), b)
detvol, stats = jacdet_grid(model, probe)
report("recklessly perturbed", stats)

# the det field is a Volume, so slices are plain arrays
mid = detvol.data[:, :, dims[2] // 2]
folded = np.count_nonzero(mid <= 0.0)
print(f"\nmid slice: {folded} of {mid.size} voxels folded")
