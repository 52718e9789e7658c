"""Pair-wise deformable 3-d image registration.

A deformation is represented by a sine-activated coordinate network
initialised to the identity and trained against windowed normalised
cross-correlation plus a conformal-invariant hyperelastic energy that
penalises length, area and volume distortion and walls off
non-positive Jacobian determinants.  All numerics are float64 numpy
with hand-derived gradients; runs are bitwise reproducible per seed.
"""

from .energy import EnergyParams, density, density_grad, density_terms
from .errors import ConfigError, DataError, NumericalError
from .evaluation import endpoint_errors, jacdet_grid, tre, warp_volume
from .grad import check_gradients, loss_gradients
from .io import (load_model, read_config, read_landmarks, read_raw_volume,
                 read_volume, save_model, write_landmarks, write_volume)
from .loss import LossConfig, LossValues, total_loss
from .net import DeformationModel, NetConfig, NormTransform
from .opt import Adam, LogRecord, PRESETS, TrainConfig, register, resolve_preset
from .synth import SinusoidalField, make_field, make_pair, make_texture
from .volume import Volume

__version__ = "0.1.0"

__all__ = [
    "Adam", "ConfigError", "DataError", "DeformationModel", "EnergyParams",
    "LogRecord", "LossConfig", "LossValues", "NetConfig", "NormTransform",
    "NumericalError", "PRESETS", "SinusoidalField", "TrainConfig", "Volume",
    "check_gradients", "density", "density_grad", "density_terms",
    "endpoint_errors", "jacdet_grid", "load_model", "loss_gradients",
    "make_field", "make_pair", "make_texture", "read_config",
    "read_landmarks", "read_raw_volume", "read_volume", "register",
    "resolve_preset", "save_model", "total_loss", "tre", "warp_volume",
    "write_landmarks", "write_volume",
]
