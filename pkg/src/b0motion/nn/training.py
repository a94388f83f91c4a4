"""Training instances, the training/fine-tuning loop, and prediction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from ..motion import RigidPose
from ..shim import ShimBasis, sample_augmentation, sh_basis
from ..volume import Grid, Mask3D, Units, Volume3D
from .autograd import mse_loss
from .optim import Adam
from .unet import UNetParams, forward

log = logging.getLogger(__name__)

B0_SCALE_HZ = 100.0


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, lr: float, batch_index: int, epoch: int):
        self.lr = lr
        self.batch_index = batch_index
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch}, batch {batch_index}, lr {lr:g})")


@dataclass(frozen=True)
class TrainingInstance:
    """Normalized network input (3 channels) and target (1 channel) on one grid."""

    inputs: np.ndarray  # (3, nx, ny, nz): b0_init / scale, anat_init / max, anat_new / max
    target: np.ndarray  # (1, nx, ny, nz): b0_new / scale
    grid: Grid
    pose: RigidPose = field(default_factory=RigidPose)
    mask: np.ndarray | None = None
    b0_scale_hz: float = B0_SCALE_HZ
    anat_scales: tuple[float, float] = (1.0, 1.0)


def _anat_scale(anat: Volume3D) -> float:
    top = float(np.max(anat.data))
    return top if top > 0 else 1.0


def network_inputs(b0_init: Volume3D, anat_init: Volume3D, anat_new: Volume3D,
                   b0_scale_hz: float = B0_SCALE_HZ) -> tuple[np.ndarray, tuple[float, float]]:
    b0_init.require_units(Units.HZ)
    for v in (anat_init, anat_new):
        if not v.grid.same_as(b0_init.grid):
            raise ValueError("network inputs must share one grid")
    scales = (_anat_scale(anat_init), _anat_scale(anat_new))
    x = np.stack([
        np.asarray(b0_init.data, dtype=np.float64) / b0_scale_hz,
        np.asarray(anat_init.data, dtype=np.float64) / scales[0],
        np.asarray(anat_new.data, dtype=np.float64) / scales[1],
    ]).astype(np.float32)
    return x, scales


def make_instance(b0_init: Volume3D, anat_init: Volume3D, anat_new: Volume3D, b0_new: Volume3D,
                  pose: RigidPose = RigidPose(), mask: Mask3D | None = None,
                  b0_scale_hz: float = B0_SCALE_HZ) -> TrainingInstance:
    b0_new.require_units(Units.HZ)
    if not b0_new.grid.same_as(b0_init.grid):
        raise ValueError("target and inputs must share one grid")
    x, scales = network_inputs(b0_init, anat_init, anat_new, b0_scale_hz)
    y = (np.asarray(b0_new.data, dtype=np.float64) / b0_scale_hz)[None].astype(np.float32)
    return TrainingInstance(x, y, b0_init.grid, pose, None if mask is None else mask.data.copy(),
                            b0_scale_hz, scales)


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-5
    weight_decay: float = 1e-7
    epochs: int = 200
    batch_size: int = 10
    augment: bool = True
    augment_range_ut: Mapping[int, float] = field(default_factory=lambda: {1: 100.0, 2: 100.0})
    masked_loss: bool = False
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


FINETUNE_HYPER = TrainHyper(lr=1e-6, weight_decay=1e-7, epochs=50)


@dataclass
class TrainResult:
    params: UNetParams
    losses: list[float]  # mean training loss per epoch


def _check_dataset(instances: Sequence[TrainingInstance]) -> Grid:
    if not instances:
        raise ValueError("training needs at least one instance")
    grid = instances[0].grid
    for inst in instances[1:]:
        if not inst.grid.same_as(grid):
            raise ValueError("all training instances must share one grid")
    return grid


def train(instances: Sequence[TrainingInstance], params: UNetParams, hyper: TrainHyper = TrainHyper(),
          basis: ShimBasis | None = None,
          on_epoch_end: Callable[[int, UNetParams, float], None] | None = None) -> TrainResult:
    """Minibatch Adam on MSE with per-epoch permutation and shim augmentation.

    ``params`` is updated in place (callers wanting to keep the originals pass a
    copy). Optimizer state persists in ``params.optimizer_state``. Training is
    deterministic given ``hyper.seed``.
    """
    grid = _check_dataset(instances)
    if hyper.augment and basis is None:
        basis = sh_basis(grid)
    rng = np.random.default_rng(hyper.seed)
    tensors = params.tensors()
    opt = Adam(tensors, lr=hyper.lr, betas=hyper.betas, eps=hyper.eps, weight_decay=hyper.weight_decay,
               state=params.optimizer_state or None)
    params.optimizer_state = opt.state
    dtype = tensors[0].data.dtype
    losses: list[float] = []
    n = len(instances)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b_idx, start in enumerate(range(0, n, hyper.batch_size)):
            batch = [instances[i] for i in order[start:start + hyper.batch_size]]
            x = np.stack([inst.inputs for inst in batch]).astype(dtype)
            y = np.stack([inst.target for inst in batch]).astype(dtype)
            if hyper.augment:
                for j, inst in enumerate(batch):
                    shift = sample_augmentation(rng, hyper.augment_range_ut, basis).data / inst.b0_scale_hz
                    x[j, 0] += shift.astype(dtype)
                    y[j, 0] += shift.astype(dtype)
            weight = None
            if hyper.masked_loss:
                weight = np.stack([inst.mask[None] for inst in batch]).astype(dtype)
            opt.zero_grad()
            loss = mse_loss(forward(params, x), y, weight)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError("loss is not finite", hyper.lr, b_idx, epoch)
            loss.backward()
            opt.step()
            epoch_loss += value * len(batch)
        losses.append(epoch_loss / n)
        log.debug("epoch %d loss %.6g", epoch + 1, losses[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, params, losses[-1])
    if not params.allfinite():
        raise TrainingDivergedError("parameters are not finite", hyper.lr, -1, hyper.epochs)
    params.metadata["epochs_trained"] = params.metadata.get("epochs_trained", 0) + hyper.epochs
    return TrainResult(params, losses)


def finetune(params: UNetParams, instances: Sequence[TrainingInstance], hyper: TrainHyper = FINETUNE_HYPER,
             basis: ShimBasis | None = None,
             on_epoch_end: Callable[[int, UNetParams, float], None] | None = None) -> TrainResult:
    """Subject-specific continuation of training on a copy of ``params`` with a fresh optimizer."""
    if not 1 <= len(instances):
        raise ValueError("fine-tuning needs at least one instance")
    tuned = params.copy()
    tuned.optimizer_state = {}
    return train(instances, tuned, hyper, basis, on_epoch_end)


def predict_batch(params: UNetParams, inputs: np.ndarray, b0_scale_hz: float = B0_SCALE_HZ) -> np.ndarray:
    """Hz predictions for a stack of normalized inputs (n, 3, nx, ny, nz)."""
    dtype = params.weights["head.weight"].data.dtype
    out = forward(params, np.asarray(inputs, dtype=dtype)).data
    return out[:, 0].astype(np.float64) * b0_scale_hz


def predict(params: UNetParams, b0_init: Volume3D, anat_init: Volume3D, anat_new: Volume3D,
            b0_scale_hz: float = B0_SCALE_HZ) -> Volume3D:
    """B0 map (Hz) at the new head position."""
    expected = params.metadata.get("grid_dims")
    if expected is not None and tuple(expected) != b0_init.dims:
        raise ValueError(f"input grid {b0_init.dims} does not match the training grid {tuple(expected)}")
    x, _ = network_inputs(b0_init, anat_init, anat_new, b0_scale_hz)
    return Volume3D(predict_batch(params, x[None], b0_scale_hz)[0], b0_init.grid, Units.HZ)


def with_lr(hyper: TrainHyper, lr: float) -> TrainHyper:
    return replace(hyper, lr=lr)
