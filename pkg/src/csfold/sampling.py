"""Block-based learnable measurement operator.

A ``SamplingOperator`` holds one trainable matrix that maps each
``B x B`` image block (flattened row-major) to ``M`` measurements.
Applying it is expressed entirely through autodiff primitives
(block reshuffle + matrix product), so the adjoint is the exact
transpose by construction and gradients reach the matrix itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError


def ratio_to_m(ratio: float, block_size: int) -> int:
    """Measurements per block for a sampling ratio: round(ratio * B^2), clamped to [1, B^2]."""
    if not (0.0 < ratio <= 1.0):
        raise ConfigurationError(f"ratio must lie in (0, 1], got {ratio}")
    n = block_size * block_size
    return min(max(int(round(ratio * n)), 1), n)


@dataclass
class SamplingOperator:
    """Learnable per-block measurement matrix of shape [M, B^2]."""

    phi: Tensor
    block_size: int

    @classmethod
    def create(cls, block_size: int, ratio: float, rng: np.random.Generator) -> "SamplingOperator":
        """Gaussian init, entries i.i.d. N(0, 1/N) with N = B^2."""
        if block_size < 1:
            raise ConfigurationError(f"block_size must be positive, got {block_size}")
        n = block_size * block_size
        m = ratio_to_m(ratio, block_size)
        phi = Tensor(rng.normal(0.0, 1.0 / np.sqrt(n), size=(m, n)), requires_grad=True)
        return cls(phi=phi, block_size=block_size)

    @property
    def m(self) -> int:
        return self.phi.shape[0]

    @property
    def n(self) -> int:
        return self.phi.shape[1]

    def kernel_view(self) -> np.ndarray:
        """The matrix rows viewed as an [M, 1, B, B] strided-convolution kernel."""
        b = self.block_size
        return self.phi.data.reshape(self.m, 1, b, b)

    def named_parameters(self, prefix: str = "sampler"):
        yield f"{prefix}.phi", self.phi


def _split_blocks(op: SamplingOperator, image: Tensor) -> tuple[Tensor, list[int], int, int]:
    """[..., 1, H, W] -> [..., B^2, nblocks] column-per-block matrix."""
    b = op.block_size
    if image.ndim not in (3, 4):
        raise DimensionError(f"expected [1,H,W] or [N,1,H,W], got shape {image.shape}")
    *lead, c, h, w = image.shape
    if c != 1:
        raise DimensionError(f"sampling expects a single channel, got {c}")
    if h % b or w % b:
        raise DimensionError(f"extents {h}x{w} not divisible by block size {b}")
    bh, bw = h // b, w // b
    t = ad.reshape(image, lead + [bh, b, bw, b])
    k = len(lead)
    t = ad.permute(t, tuple(range(k)) + (k, k + 2, k + 1, k + 3))
    t = ad.reshape(t, lead + [bh * bw, b * b])
    return ad.transpose2d(t), lead, bh, bw


def _merge_blocks(op: SamplingOperator, cols: Tensor, lead: list[int], bh: int, bw: int) -> Tensor:
    """Inverse of ``_split_blocks``: [..., B^2, nblocks] -> [..., 1, H, W]."""
    b = op.block_size
    t = ad.transpose2d(cols)
    t = ad.reshape(t, lead + [bh, bw, b, b])
    k = len(lead)
    t = ad.permute(t, tuple(range(k)) + (k, k + 2, k + 1, k + 3))
    return ad.reshape(t, lead + [1, bh * b, bw * b])


def sample(op: SamplingOperator, image: Tensor) -> Tensor:
    """Measure every block: [..., 1, H, W] -> [..., M, H/B, W/B]."""
    cols, lead, bh, bw = _split_blocks(op, image)
    y = ad.matmul(op.phi, cols)
    return ad.reshape(y, lead + [op.m, bh, bw])


def adjoint(op: SamplingOperator, measurements: Tensor) -> Tensor:
    """Exact adjoint of ``sample``: [..., M, H/B, W/B] -> [..., 1, H, W]."""
    if measurements.ndim not in (3, 4):
        raise DimensionError(f"expected [M,h,w] or [N,M,h,w], got shape {measurements.shape}")
    *lead, m, bh, bw = measurements.shape
    if m != op.m:
        raise DimensionError(f"measurement channels {m} != operator rows {op.m}")
    y = ad.reshape(measurements, lead + [m, bh * bw])
    cols = ad.matmul(ad.transpose2d(op.phi), y)
    return _merge_blocks(op, cols, lead, bh, bw)


def init_reconstruction(op: SamplingOperator, measurements: Tensor) -> Tensor:
    """Back-projected starting image for the iterative reconstruction."""
    return adjoint(op, measurements)
