"""Patch pipeline, Adam, warmup+cosine schedule, and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigurationError, ContractError, NumericalError
from .model import ReconstructionModel, model_forward, mse_loss
from .sampling import sample

DIHEDRAL_MODES = range(8)


def augment(patch: np.ndarray, mode: int) -> np.ndarray:
    """Apply one of the 8 dihedral transforms: mode%4 quarter-turns,
    preceded by a horizontal flip for modes 4..7."""
    if mode not in DIHEDRAL_MODES:
        raise ConfigurationError(f"augment mode must be 0..7, got {mode}")
    out = np.fliplr(patch) if mode >= 4 else patch
    return np.ascontiguousarray(np.rot90(out, mode % 4))


def invert_mode(mode: int) -> int:
    """The mode whose transform undoes ``mode`` (flips are involutions)."""
    if mode not in DIHEDRAL_MODES:
        raise ConfigurationError(f"augment mode must be 0..7, got {mode}")
    return (4 - mode) % 4 if mode < 4 else mode


@dataclass
class PatchDataset:
    """Seeded random crops from grayscale [0,1] images.

    The patch stream for an epoch is a pure function of (seed, epoch):
    replaying an epoch yields identical patches.
    """

    images: list[np.ndarray]
    patch_size: int = 96
    patches_per_epoch: int = 500
    augment_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.images:
            raise ConfigurationError("dataset needs at least one source image")
        if self.patch_size < 1 or self.patches_per_epoch < 1:
            raise ConfigurationError("patch_size and patches_per_epoch must be positive")
        for i, img in enumerate(self.images):
            if img.ndim != 2:
                raise ConfigurationError(f"source image {i} must be 2-d, got shape {img.shape}")
            if img.shape[0] < self.patch_size or img.shape[1] < self.patch_size:
                raise ConfigurationError(
                    f"source image {i} ({img.shape[0]}x{img.shape[1]}) smaller than patch size {self.patch_size}"
                )
            lo, hi = float(img.min()), float(img.max())
            if lo < 0.0 or hi > 1.0:
                raise ConfigurationError(f"source image {i} has values outside [0,1]: [{lo}, {hi}]")

    def epoch_patches(self, epoch: int, seed: Optional[int] = None) -> list[np.ndarray]:
        base = self.seed if seed is None else seed
        rng = np.random.default_rng([base, epoch])
        p = self.patch_size
        patches = []
        for _ in range(self.patches_per_epoch):
            img = self.images[int(rng.integers(len(self.images)))]
            top = int(rng.integers(img.shape[0] - p + 1))
            left = int(rng.integers(img.shape[1] - p + 1))
            crop = img[top:top + p, left:left + p]
            mode = int(rng.integers(8)) if self.augment_enabled else 0
            patches.append(augment(crop, mode))
        return patches

    def epoch_batches(self, epoch: int, batch_size: int, seed: Optional[int] = None) -> list[np.ndarray]:
        """Patches stacked into [n, 1, P, P] arrays; a short final batch is kept."""
        patches = self.epoch_patches(epoch, seed)
        return [
            np.stack(patches[i:i + batch_size])[:, None, :, :]
            for i in range(0, len(patches), batch_size)
        ]


@dataclass
class LrSchedule:
    """Linear warmup to lr_max, then cosine decay to lr_min."""

    lr_max: float = 5e-4
    lr_min: float = 5e-5
    warmup_epochs: float = 3.0
    total_epochs: float = 100.0

    def __post_init__(self):
        if self.lr_max <= 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ConfigurationError("need 0 <= lr_min <= lr_max and lr_max > 0")
        if self.warmup_epochs < 0 or self.total_epochs <= 0 or self.warmup_epochs > self.total_epochs:
            raise ConfigurationError("need 0 <= warmup_epochs <= total_epochs")


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Learning rate at a fractional epoch; continuous at the warmup boundary."""
    w, total = schedule.warmup_epochs, schedule.total_epochs
    if epoch < w:
        return schedule.lr_max * epoch / w
    if total <= w:
        return schedule.lr_min
    t = min(max((epoch - w) / (total - w), 0.0), 1.0)
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * t))


class AdamState:
    """First/second moment buffers and step counter for one parameter list."""

    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}


def adam_step(state: AdamState, params: list[tuple[str, Tensor]], lr: float) -> None:
    """Bias-corrected Adam update; gradients are cleared afterwards."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.grad = None


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def metrics_csv(self) -> str:
        lines = ["epoch,step,lr,loss,train_psnr"]
        for row in self.metrics:
            lines.append(
                f"{row['epoch']},{row['step']},{row['lr']:.8e},{row['loss']:.8e},{_fmt_psnr(row['train_psnr'])}"
            )
        return "\n".join(lines) + "\n"


def _fmt_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def train(
    model: ReconstructionModel,
    dataset: PatchDataset,
    schedule: LrSchedule,
    *,
    epochs: int,
    batch_size: int,
    seed: int,
    out_dir: Optional[Path] = None,
    config=None,
    optimizer: Optional[AdamState] = None,
    max_steps: Optional[int] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """End-to-end training: measure each batch with the model's own sampler,
    reconstruct, and minimize mean squared error.

    Writes a checkpoint and a metrics CSV per epoch when ``out_dir`` is set.
    ``on_step`` sees each metrics row (used for early stopping by callers).
    """
    if epochs < 1 or batch_size < 1:
        raise ConfigurationError("epochs and batch_size must be positive")
    if dataset.patch_size % model.sampler.block_size != 0:
        raise ConfigurationError(
            f"patch_size {dataset.patch_size} not divisible by block_size {model.sampler.block_size}"
        )

    params = model.named_parameters()
    state = optimizer if optimizer is not None else AdamState(params)
    result = TrainResult()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    step = 0
    for epoch in range(epochs):
        batches = dataset.epoch_batches(epoch, batch_size, seed=seed)
        for i, batch in enumerate(batches):
            x = Tensor(batch)
            lr = lr_at(schedule, epoch + i / len(batches))
            with Tape() as tape:
                y = sample(model.sampler, x)
                xhat, _ = model_forward(model, y)
                loss = mse_loss(xhat, x)
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NumericalError(
                        f"non-finite loss {loss_value} at epoch {epoch} step {step} (lr={lr:.3e})"
                    )
                tape.backward(loss)
            adam_step(state, params, lr)
            step += 1
            psnr = math.inf if loss_value == 0.0 else 10.0 * math.log10(1.0 / loss_value)
            row = {"epoch": epoch, "step": step, "lr": lr, "loss": loss_value, "train_psnr": psnr}
            result.metrics.append(row)
            if on_step is not None:
                on_step(row)
            if max_steps is not None and step >= max_steps:
                break
        if out_dir is not None:
            from .checkpoint import save_checkpoint  # local import to avoid a cycle

            path = out_dir / f"ckpt_epoch_{epoch:03d}.ckpt"
            save_checkpoint(path, model, config=config, optimizer=state)
            result.checkpoints.append(path)
            (out_dir / "metrics.csv").write_text(result.metrics_csv())
        if max_steps is not None and step >= max_steps:
            break
    return result
