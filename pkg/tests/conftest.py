import numpy as np
import pytest

from conformreg.net import DeformationModel, NetConfig, NormTransform
from conformreg.synth import make_texture
from conformreg.volume import Volume


def texture_volume(dims=(20, 20, 20), spacing=(1.0, 1.2, 0.9), origin=(0.0, 0.0, 0.0),
                   seed=5, wavelengths=(4.0, 14.0)):
    """Smooth, strongly textured volume; the workhorse test image."""
    tex = make_texture(seed=seed, wavelengths=wavelengths)
    probe = Volume(np.zeros(dims), spacing, origin)
    return Volume(tex(probe.grid_points()).reshape(dims), spacing, origin)


def tiny_model(layers=3, hidden=8, omega=6.0, encoder="periodic", seed=0,
               geometry=((20, 20, 20), (1.0, 1.2, 0.9), (0.0, 0.0, 0.0)),
               warp_scale=0.01):
    """Small net with a non-zero final layer so gradients are non-trivial."""
    dims, spacing, origin = geometry
    norm = NormTransform.from_geometry(dims, spacing, origin)
    cfg = NetConfig(layers=layers, hidden=hidden, omega=omega, encoder=encoder,
                    fourier_features=max(4, hidden // 2))
    model = DeformationModel(cfg, norm, seed=seed)
    if warp_scale:
        rng = np.random.default_rng(seed + 1000)
        w, b = model.layers[-1]
        model.layers[-1] = (warp_scale * rng.standard_normal(w.shape),
                            0.5 * warp_scale * rng.standard_normal(b.shape))
    return model


@pytest.fixture
def textured():
    return texture_volume()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
