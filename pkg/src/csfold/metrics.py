"""Image quality metrics, parameter/FLOP accounting, and the noise sweep.

FLOP convention: one multiply-add counts as 2 operations; convolutions,
matrix products, and the per-block measurement products are counted,
normalizations and activations are not. The convention is fixed here and
echoed in the complexity CSV, because published counts for comparable
models do not state theirs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError
from .model import Conv2d, ReconstructionModel, model_forward
from .sampling import sample

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_2d(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d image (or [1,H,W]), got shape {arr.shape}")
    return np.asarray(arr, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); identical images return +inf."""
    x, y = _as_2d(a), _as_2d(b)
    if x.shape != y.shape:
        raise DimensionError(f"psnr: shapes disagree, {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1-d window along both axes."""
    k = window.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ window
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ window


def ssim(a, b) -> float:
    """Mean local structural similarity with the standard Gaussian window
    (11x11, sigma 1.5, K1=0.01, K2=0.03) on [0,1] images."""
    x, y = _as_2d(a), _as_2d(b)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: shapes disagree, {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise DimensionError(f"ssim: image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x = _filter_valid(x, window)
    mu_y = _filter_valid(y, window)
    var_x = _filter_valid(x * x, window) - mu_x * mu_x
    var_y = _filter_valid(y * y, window) - mu_y * mu_y
    cov = _filter_valid(x * y, window) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# complexity accounting


@dataclass
class ComplexityReport:
    """Exact learnable-scalar counts and analytic FLOPs, broken down by module."""

    params: dict[str, int] = field(default_factory=dict)
    flops: dict[str, int] = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    def to_csv(self) -> str:
        lines = ["name,params,flops"]
        names = list(self.params)
        for name in self.flops:
            if name not in self.params:
                names.append(name)
        for name in names:
            lines.append(f"{name},{self.params.get(name, 0)},{self.flops.get(name, 0)}")
        lines.append(f"total,{self.total_params},{self.total_flops}")
        return "\n".join(lines) + "\n"


def _module_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "iterations":
        return f"iterations.{parts[1]}"
    return parts[0]


def count_params(model: ReconstructionModel) -> ComplexityReport:
    """Exact count over the deterministic parameter enumeration, sampler included."""
    report = ComplexityReport()
    for name, p in model.named_parameters():
        key = _module_of(name)
        report.params[key] = report.params.get(key, 0) + p.size
    return report


def _conv_flops(conv: Conv2d, h: int, w: int) -> int:
    cout, cg, kh, kw = conv.weight.shape
    ho = (h + 2 * conv.padding - kh) // conv.stride + 1
    wo = (w + 2 * conv.padding - kw) // conv.stride + 1
    return 2 * cout * cg * kh * kw * ho * wo


def _attention_flops(c1: int, h: int, w: int) -> int:
    hw = h * w
    return 2 * c1 * hw * c1 + 2 * hw * c1 * c1  # key^T query, then value mixing


def count_flops(model: ReconstructionModel, h: int, w: int) -> ComplexityReport:
    """Analytic multiply-add count (x2) for reconstructing an HxW image,
    acquisition included. Counts match the layer formulas exactly:
    conv 2*Cout*(Cin/g)*kh*kw*H'*W', matmul 2*m*k*n, measurement products
    2*M*N per block per application."""
    b = model.sampler.block_size
    if h % b or w % b:
        raise DimensionError(f"extents {h}x{w} not divisible by block size {b}")
    report = count_params(model)
    nblocks = (h // b) * (w // b)
    per_apply = 2 * model.sampler.m * model.sampler.n * nblocks
    c = model.channels
    c1 = c - 1

    report.flops["sampler"] = per_apply  # acquisition
    report.flops["init"] = per_apply  # back-projection
    report.flops["conv0"] = _conv_flops(model.conv0, h, w)
    for k, stage in enumerate(model.iterations):
        total = 0
        if stage.inertial is not None:
            ca = stage.inertial.ca
            for conv in (ca.conv_v, ca.dconv_v, ca.conv_k, ca.dconv_k, ca.conv_q, ca.dconv_q, ca.conv_a):
                total += _conv_flops(conv, h, w)
            total += _attention_flops(c1, h, w)
        total += 2 * per_apply  # gradient step: one sample + one adjoint
        ca = stage.projection.ca
        for conv in (ca.conv_v, ca.dconv_v, ca.conv_k, ca.dconv_k, ca.conv_q, ca.dconv_q, ca.conv_a):
            total += _conv_flops(conv, h, w)
        total += _attention_flops(c1, h, w)
        total += _conv_flops(stage.projection.conv_o, h, w)
        for ffb in (stage.ffn.ffb1, stage.ffn.ffb2):
            total += _conv_flops(ffb.expand, h, w)
            total += _conv_flops(ffb.depth, h, w)
            total += _conv_flops(ffb.project, h, w)
        report.flops[f"iterations.{k:02d}"] = total
    return report


# ---------------------------------------------------------------------------
# noise robustness


@dataclass
class NoiseSweepResult:
    rows: list[tuple[float, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["sigma,psnr_db,ssim"]
        for sigma, p, s in self.rows:
            p_txt = "inf" if math.isinf(p) else f"{p:.6f}"
            lines.append(f"{sigma:g},{p_txt},{s:.6f}")
        return "\n".join(lines) + "\n"


def reconstruct_image(model: ReconstructionModel, image: np.ndarray) -> np.ndarray:
    """Pad to the block grid, measure, reconstruct, crop back. Returns 2-d."""
    from .imageio import crop_to_extents, pad_to_block  # local import to avoid a cycle

    tensor = Tensor(np.asarray(image, dtype=ad.default_dtype())[None])
    padded, extents = pad_to_block(tensor, model.sampler.block_size)
    y = sample(model.sampler, padded)
    xhat, _ = model_forward(model, y)
    return crop_to_extents(xhat, extents).data[0]


def evaluate_image(model: ReconstructionModel, clean: np.ndarray, measured: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Reconstruct ``measured`` (default: the clean image itself) and score it
    against ``clean``: (PSNR of the raw estimate, SSIM of the clamped estimate)."""
    source = clean if measured is None else measured
    recon = reconstruct_image(model, source)
    return psnr(recon, clean), ssim(np.clip(recon, 0.0, 1.0), clean)


def noise_sweep(
    model: ReconstructionModel,
    images: Sequence[np.ndarray],
    sigmas: Sequence[float],
    seed: int,
) -> NoiseSweepResult:
    """Reconstruction quality versus input noise level.

    For each sigma, i.i.d. Gaussian noise (std sigma in [0,1] units) is added
    to every clean image, clamped, then measured and reconstructed; PSNR/SSIM
    are reported against the clean originals.
    """
    sigmas = [float(s) for s in sigmas]
    if not sigmas:
        raise ConfigurationError("noise sweep needs at least one sigma")
    if any(s < 0 for s in sigmas) or any(b <= a for a, b in zip(sigmas, sigmas[1:])):
        raise ConfigurationError(f"sigmas must be non-negative and strictly increasing, got {sigmas}")
    if not images:
        raise ConfigurationError("noise sweep needs at least one image")

    result = NoiseSweepResult()
    for si, sigma in enumerate(sigmas):
        psnrs, ssims = [], []
        for ii, clean in enumerate(images):
            rng = np.random.default_rng([seed, si, ii])
            noisy = clean + sigma * rng.standard_normal(clean.shape)
            noisy = np.clip(noisy, 0.0, 1.0).astype(ad.default_dtype())
            p, s = evaluate_image(model, clean, measured=noisy)
            psnrs.append(p)
            ssims.append(s)
        result.rows.append((sigma, float(np.mean(psnrs)), float(np.mean(ssims))))
    return result
