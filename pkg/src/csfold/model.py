"""Unrolled reconstruction network built from channel-wise cross attention.

Each of the K stages works on a C-channel feature map whose first channel
carries the running image estimate and whose remaining C-1 channels carry
inertial features from the previous stage. A stage applies, in order:

* an inertial attention block (stages 2..K) mixing the previous two
  stages' features,
* a projection attention block that takes one gradient-descent step on the
  measurement residual and fuses the stepped image with the inertial
  features,
* a feed-forward stage with a single global skip connection.

All parameters, the sampling matrix included, are trained end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError
from .sampling import SamplingOperator, adjoint, init_reconstruction, sample

RHO_INIT = 0.5
LN_EPS = 1e-5


# The attention map applies no temperature, so the embedding convs start
# small to keep early-training logits (summed over HW positions) out of
# softmax saturation.
ATTENTION_EMBED_GAIN = 0.25


def _uniform_fan_in(
    rng: np.random.Generator, cout: int, cin_g: int, kh: int, kw: int, gain: float = 1.0
) -> np.ndarray:
    limit = gain / np.sqrt(cin_g * kh * kw)
    return rng.uniform(-limit, limit, size=(cout, cin_g, kh, kw))


@dataclass
class Conv2d:
    weight: Tensor
    bias: Optional[Tensor]
    stride: int = 1
    padding: int = 0
    groups: int = 1

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        cin: int,
        cout: int,
        kernel: int,
        *,
        groups: int = 1,
        stride: int = 1,
        padding: Optional[int] = None,
        bias: bool = True,
        gain: float = 1.0,
    ) -> "Conv2d":
        if padding is None:
            padding = kernel // 2
        weight = Tensor(
            _uniform_fan_in(rng, cout, cin // groups, kernel, kernel, gain), requires_grad=True
        )
        b = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        return cls(weight=weight, bias=b, stride=stride, padding=padding, groups=groups)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


@dataclass
class ChannelNorm:
    """Per-position standardization over the channel axis, per-channel affine."""

    gamma: Tensor
    beta: Tensor

    @classmethod
    def create(cls, channels: int) -> "ChannelNorm":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        c = self.gamma.shape[0]
        g = ad.reshape(self.gamma, (c, 1, 1))
        b = ad.reshape(self.beta, (c, 1, 1))
        return ad.layer_norm(x, -3, g, b, eps=LN_EPS)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


@dataclass
class SpatialNorm:
    """Standardization over spatial positions with a scalar affine.

    Used for the single-channel query, where channel statistics would be
    degenerate.
    """

    gamma: Tensor
    beta: Tensor

    @classmethod
    def create(cls) -> "SpatialNorm":
        return cls(
            gamma=Tensor(np.ones(1), requires_grad=True),
            beta=Tensor(np.zeros(1), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, (-2, -1), self.gamma, self.beta, eps=LN_EPS)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


@dataclass
class CrossAttentionWeights:
    """Pointwise + depthwise embeddings and the output projection of one attention block."""

    conv_v: Conv2d
    dconv_v: Conv2d
    conv_k: Conv2d
    dconv_k: Conv2d
    conv_q: Conv2d
    dconv_q: Conv2d
    conv_a: Conv2d

    @classmethod
    def create(cls, rng: np.random.Generator, feature_channels: int, query_channels: int) -> "CrossAttentionWeights":
        c1 = feature_channels
        g = ATTENTION_EMBED_GAIN
        return cls(
            conv_v=Conv2d.create(rng, c1, c1, 1, gain=g),
            dconv_v=Conv2d.create(rng, c1, c1, 3, groups=c1, gain=g),
            conv_k=Conv2d.create(rng, c1, c1, 1, gain=g),
            dconv_k=Conv2d.create(rng, c1, c1, 3, groups=c1, gain=g),
            conv_q=Conv2d.create(rng, query_channels, c1, 1, gain=g),
            dconv_q=Conv2d.create(rng, c1, c1, 3, groups=c1, gain=g),
            conv_a=Conv2d.create(rng, c1, c1, 1),
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name in ("conv_v", "dconv_v", "conv_k", "dconv_k", "conv_q", "dconv_q", "conv_a"):
            yield from getattr(self, name).named_parameters(f"{prefix}.{name}")


def cross_attention(
    w: CrossAttentionWeights,
    v_in: Tensor,
    k_in: Tensor,
    q_in: Tensor,
    trace: Optional[dict] = None,
) -> Tensor:
    """Channel-wise attention: tokens are HW x (C-1); the (C-1) x (C-1) map
    is softmax-normalized along the key-channel axis, so its columns are
    mixture weights over value channels. No temperature is applied."""
    v = w.dconv_v(w.conv_v(v_in))
    k = w.dconv_k(w.conv_k(k_in))
    q = w.dconv_q(w.conv_q(q_in))
    *lead, c1, h, wd = v.shape

    def tokens(t: Tensor) -> Tensor:
        return ad.transpose2d(ad.reshape(t, list(lead) + [c1, h * wd]))

    vt, kt, qt = tokens(v), tokens(k), tokens(q)
    logits = ad.matmul(ad.transpose2d(kt), qt)
    attn = ad.softmax(logits, axis=-2)
    if trace is not None:
        trace.setdefault("attention", []).append(np.array(attn.data, copy=True))
    mixed = ad.matmul(vt, attn)
    mixed = ad.reshape(ad.transpose2d(mixed), list(lead) + [c1, h, wd])
    return w.conv_a(mixed)


@dataclass
class InertialAttentionWeights:
    ln_vk: ChannelNorm
    ln_q: ChannelNorm
    ca: CrossAttentionWeights

    @classmethod
    def create(cls, rng: np.random.Generator, feature_channels: int) -> "InertialAttentionWeights":
        return cls(
            ln_vk=ChannelNorm.create(feature_channels),
            ln_q=ChannelNorm.create(feature_channels),
            ca=CrossAttentionWeights.create(rng, feature_channels, feature_channels),
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.ln_vk.named_parameters(f"{prefix}.ln_vk")
        yield from self.ln_q.named_parameters(f"{prefix}.ln_q")
        yield from self.ca.named_parameters(f"{prefix}.ca")


def inertial_attention(
    w: InertialAttentionWeights,
    z_prev: Tensor,
    z_prev2: Tensor,
    trace: Optional[dict] = None,
) -> Tensor:
    """Mix the two previous stages' features; one shared norm feeds V and K,
    and the residual adds the un-normalized newer features."""
    if z_prev.shape != z_prev2.shape:
        raise DimensionError(f"feature shapes disagree: {z_prev.shape} vs {z_prev2.shape}")
    vk = w.ln_vk(z_prev2)
    q = w.ln_q(z_prev)
    return ad.add(cross_attention(w.ca, vk, vk, q, trace), z_prev)


def gradient_step(rho: Tensor, sampler: SamplingOperator, r: Tensor, y: Tensor) -> Tensor:
    """One descent step on the measurement residual: r - rho * adj(sample(r) - y)."""
    residual = ad.sub(sample(sampler, r), y)
    return ad.sub(r, ad.scale(adjoint(sampler, residual), rho))


@dataclass
class ProjectionAttentionWeights:
    rho: Tensor
    ln_vk: ChannelNorm
    ln_q: SpatialNorm
    ca: CrossAttentionWeights
    conv_o: Conv2d

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int) -> "ProjectionAttentionWeights":
        c1 = channels - 1
        return cls(
            rho=Tensor(np.full(1, RHO_INIT), requires_grad=True),
            ln_vk=ChannelNorm.create(c1),
            ln_q=SpatialNorm.create(),
            ca=CrossAttentionWeights.create(rng, c1, 1),
            conv_o=Conv2d.create(rng, channels, channels, 1),
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.rho", self.rho
        yield from self.ln_vk.named_parameters(f"{prefix}.ln_vk")
        yield from self.ln_q.named_parameters(f"{prefix}.ln_q")
        yield from self.ca.named_parameters(f"{prefix}.ca")
        yield from self.conv_o.named_parameters(f"{prefix}.conv_o")


def projection_attention(
    w: ProjectionAttentionWeights,
    sampler: SamplingOperator,
    r: Tensor,
    y: Tensor,
    z_hat: Tensor,
    trace: Optional[dict] = None,
) -> Tensor:
    """Step the image channel, attend the features against it, and mix.

    The stepped image is the 1-channel query (its pointwise embedding lifts
    it to C-1 channels) and ends up as the last channel of the concatenation
    feeding the output mix.
    """
    r_hat = gradient_step(w.rho, sampler, r, y)
    vk = w.ln_vk(z_hat)
    o = ad.add(cross_attention(w.ca, vk, vk, w.ln_q(r_hat), trace), z_hat)
    return w.conv_o(ad.concat([o, r_hat], axis=-3))


@dataclass
class FeedForwardBlock:
    expand: Conv2d
    depth: Conv2d
    project: Conv2d

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, expansion: int) -> "FeedForwardBlock":
        hidden = channels * expansion
        return cls(
            expand=Conv2d.create(rng, channels, hidden, 1),
            depth=Conv2d.create(rng, hidden, hidden, 3, groups=hidden),
            project=Conv2d.create(rng, hidden, channels, 1),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return self.project(ad.gelu(self.depth(ad.gelu(self.expand(x)))))

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.expand.named_parameters(f"{prefix}.expand")
        yield from self.depth.named_parameters(f"{prefix}.depth")
        yield from self.project.named_parameters(f"{prefix}.project")


@dataclass
class FeedForwardWeights:
    ln1: ChannelNorm
    ffb1: FeedForwardBlock
    ln2: ChannelNorm
    ffb2: FeedForwardBlock

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, expansion: int) -> "FeedForwardWeights":
        return cls(
            ln1=ChannelNorm.create(channels),
            ffb1=FeedForwardBlock.create(rng, channels, expansion),
            ln2=ChannelNorm.create(channels),
            ffb2=FeedForwardBlock.create(rng, channels, expansion),
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.ln1.named_parameters(f"{prefix}.ln1")
        yield from self.ffb1.named_parameters(f"{prefix}.ffb1")
        yield from self.ln2.named_parameters(f"{prefix}.ln2")
        yield from self.ffb2.named_parameters(f"{prefix}.ffb2")


def feed_forward(w: FeedForwardWeights, s: Tensor) -> Tensor:
    """Two sequential norm+block stages inside a single global skip."""
    return ad.add(s, w.ffb2(w.ln2(w.ffb1(w.ln1(s)))))


@dataclass
class IterationWeights:
    inertial: Optional[InertialAttentionWeights]
    projection: ProjectionAttentionWeights
    ffn: FeedForwardWeights

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        channels: int,
        expansion: int,
        with_inertial: bool,
    ) -> "IterationWeights":
        inertial = InertialAttentionWeights.create(rng, channels - 1) if with_inertial else None
        return cls(
            inertial=inertial,
            projection=ProjectionAttentionWeights.create(rng, channels),
            ffn=FeedForwardWeights.create(rng, channels, expansion),
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self.inertial is not None:
            yield from self.inertial.named_parameters(f"{prefix}.inertial")
        yield from self.projection.named_parameters(f"{prefix}.projection")
        yield from self.ffn.named_parameters(f"{prefix}.ffn")


def run_iteration(
    w: IterationWeights,
    sampler: SamplingOperator,
    x_prev: Tensor,
    z_prev2: Optional[Tensor],
    y: Tensor,
    trace: Optional[dict] = None,
) -> Tensor:
    """One full stage: split channels, attend, step-and-fuse, feed forward."""
    if (w.inertial is None) != (z_prev2 is None):
        raise ContractError("inertial features must be supplied exactly when the stage has inertial weights")
    c = x_prev.shape[-3]
    r = ad.slice_channels(x_prev, 0, 1)
    z = ad.slice_channels(x_prev, 1, c)
    z_hat = inertial_attention(w.inertial, z, z_prev2, trace) if w.inertial is not None else z
    s = projection_attention(w.projection, sampler, r, y, z_hat, trace)
    return feed_forward(w.ffn, s)


@dataclass
class ReconstructionModel:
    """The complete trainable parameter set: sampler, input embedding, K stages."""

    sampler: SamplingOperator
    conv0: Conv2d
    iterations: list[IterationWeights] = field(default_factory=list)
    channels: int = 32

    @classmethod
    def build(
        cls,
        *,
        block_size: int = 32,
        ratio: float = 0.1,
        channels: int = 32,
        iterations: int = 10,
        ffb_expansion: int = 4,
        inertial_attention: bool = True,
        seed: int = 0,
    ) -> "ReconstructionModel":
        if channels < 2:
            raise ConfigurationError(f"channels must be >= 2, got {channels}")
        if iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {iterations}")
        if ffb_expansion < 1:
            raise ConfigurationError(f"ffb_expansion must be >= 1, got {ffb_expansion}")
        rng = np.random.default_rng(seed)
        sampler = SamplingOperator.create(block_size, ratio, rng)
        conv0 = Conv2d.create(rng, 1, channels, 3)
        stages = [
            IterationWeights.create(rng, channels, ffb_expansion, with_inertial=(k > 0 and inertial_attention))
            for k in range(iterations)
        ]
        return cls(sampler=sampler, conv0=conv0, iterations=stages, channels=channels)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.sampler.named_parameters())
        out.extend(self.conv0.named_parameters("conv0"))
        for k, stage in enumerate(self.iterations):
            out.extend(stage.named_parameters(f"iterations.{k:02d}"))
        return out

    def forward(self, y: Tensor, trace: Optional[dict] = None) -> tuple[Tensor, Tensor]:
        return model_forward(self, y, trace)


def model_forward(
    model: ReconstructionModel,
    y: Tensor,
    trace: Optional[dict] = None,
) -> tuple[Tensor, Tensor]:
    """Reconstruct from measurements; returns (image estimate, final features)."""
    c = model.channels
    x = model.conv0(init_reconstruction(model.sampler, y))
    x_prev2: Optional[Tensor] = None
    for stage in model.iterations:
        z_prev2 = ad.slice_channels(x_prev2, 1, c) if stage.inertial is not None else None
        x_prev2, x = x, run_iteration(stage, model.sampler, x, z_prev2, y, trace)
    return ad.slice_channels(x, 0, 1), x


def mse_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all pixels and batch items."""
    if prediction.shape != target.shape:
        raise DimensionError(f"mse_loss: shapes disagree, {prediction.shape} vs {target.shape}")
    diff = ad.sub(prediction, target)
    return ad.mean_all(ad.mul(diff, diff))
