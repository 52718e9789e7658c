"""Adam optimiser and the registration training loop.

One epoch is one optimisation step on one freshly drawn batch of mask
points; there is no inner batching or data pass, so `epochs` is also
the total number of Adam updates.  The logged loss of an epoch is
evaluated at the parameters *before* that epoch's update.

Determinism: with a fixed seed the batch sequence, loss values and
parameter trajectory reproduce bit for bit.  BLAS kernels are
deterministic for a fixed thread count; `deterministic=True`
additionally pins them to one thread so checkpoints match across
machines and --threads settings (at some speed cost on big machines).
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericalError
from .grad import loss_gradients
from .loss import LossConfig
from .net import DeformationModel, NetConfig, NormTransform


class Adam:
    """Classic Adam with bias correction, on lists of numpy arrays.

    With bias correction the very first update is lr * g / (|g| + eps),
    i.e. a signed step of almost exactly lr per parameter, which is the
    behaviour the training schedule is tuned around.
    """

    def __init__(self, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3000
    points: int = 10000
    lr: float = 1e-5
    seed: int = 0
    log_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    deterministic: bool = False
    threads: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 0 or self.points < 1 or self.log_every < 1:
            raise ConfigError("epochs must be >= 0, points and log_every >= 1")


# named recipes: architecture plus schedule; loss settings keep their
# own defaults
PRESETS = {
    "large-motion": {
        "net": {"layers": 4, "hidden": 256, "omega": 32.0},
        "train": {"epochs": 6000, "points": 15000},
    },
    "small-motion": {
        "net": {"layers": 3, "hidden": 256, "omega": 32.0},
        "train": {"epochs": 3000, "points": 10000},
    },
}


def resolve_preset(name: str):
    """(NetConfig, TrainConfig) for a named recipe."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    spec = PRESETS[name]
    return NetConfig(**spec["net"]), TrainConfig(**spec["train"])


@dataclass(frozen=True)
class LogRecord:
    epoch: int
    similarity: float
    reg: float
    total: float


def _thread_context(cfg: TrainConfig):
    limit = 1 if cfg.deterministic else cfg.threads
    if limit is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(limit))


def register(source, target, *, model: DeformationModel = None,
             net_cfg: NetConfig = None, loss_cfg: LossConfig = LossConfig(),
             train_cfg: TrainConfig = TrainConfig(), callback=None):
    """Fit a deformation mapping target coordinates into the source.

    Batches are drawn from the target volume's mask with sub-voxel
    jitter.  Returns (model, log) where log is a list of LogRecord for
    epoch 1, every log_every-th epoch, and the final epoch.  epochs=0
    returns the freshly initialised (identity) model, which is how an
    identity checkpoint is produced.

    Raises NumericalError quoting the epoch if the loss goes non-finite.
    """
    if model is None:
        norm = NormTransform.from_geometry(target.dims, target.spacing, target.origin)
        model = DeformationModel(net_cfg or NetConfig(), norm, seed=train_cfg.seed)

    rng = np.random.default_rng(train_cfg.seed)
    adam = Adam(lr=train_cfg.lr, beta1=train_cfg.beta1,
                beta2=train_cfg.beta2, eps=train_cfg.adam_eps)
    log = []
    with _thread_context(train_cfg):
        for epoch in range(1, train_cfg.epochs + 1):
            points = target.sample_points(train_cfg.points, rng)
            try:
                values, grads = loss_gradients(source, target, model, points, loss_cfg)
            except NumericalError as err:
                raise NumericalError(f"epoch {epoch}: {err}") from err
            model.set_parameters(adam.step(model.parameters(), grads))
            if epoch == 1 or epoch % train_cfg.log_every == 0 or epoch == train_cfg.epochs:
                log.append(LogRecord(epoch, values.similarity, values.reg, values.total))
            if callback is not None:
                callback(epoch, values, model)
    return model, log
