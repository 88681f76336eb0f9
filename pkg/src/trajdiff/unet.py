"""Temporal U-Net noise predictor and the encoder-half return predictor.

Both networks read trajectories channel-first, ``[batch, state+action, T]``,
and are fully convolutional along ``T``: no parameter shape depends on the
horizon, only on the feature width.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import Conv1d, GroupNorm, Linear, Module, kaiming_uniform, zeros


def sinusoidal_features(steps, dim: int) -> np.ndarray:
    """Fixed sin/cos features of integer diffusion steps, shape ``[B, dim]``."""
    steps = np.asarray(steps, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = steps[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class TimestepEmbedding(Module):
    """Sinusoidal features of ``i`` followed by one fully-connected layer."""

    def __init__(self, rng, feature_dim: int, out_dim: int):
        self.feature_dim = feature_dim
        self.proj = Linear(rng, feature_dim, out_dim)

    def __call__(self, features: Tensor) -> Tensor:
        return self.proj(features)


class ResidualBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int, embed_dim: int, kernel_size: int, groups: int):
        self.conv1 = Conv1d(rng, c_in, c_out, kernel_size)
        self.norm1 = GroupNorm(c_out, groups)
        self.time = TimestepEmbedding(rng, embed_dim, c_out)
        self.conv2 = Conv1d(rng, c_out, c_out, kernel_size)
        self.norm2 = GroupNorm(c_out, groups)
        self.skip = Conv1d(rng, c_in, c_out, 1) if c_in != c_out else None

    def __call__(self, x: Tensor, features: Tensor) -> Tensor:
        h = self.norm1(self.conv1(x))
        h = ad.add_channelwise(h, self.time(features))
        h = ad.mish(self.norm2(self.conv2(h)))
        residual = self.skip(x) if self.skip is not None else x
        return ad.add(h, residual)


class Resample(Module):
    def __init__(self, rng, channels: int, up: bool, kernel_size: int = 3):
        self.weight = kaiming_uniform(rng, (channels, channels, kernel_size), channels * kernel_size)
        self.bias = zeros((channels,))
        self.up = up

    def __call__(self, x: Tensor) -> Tensor:
        if self.up:
            return ad.upsample(x, self.weight, self.bias)
        return ad.downsample(x, self.weight, self.bias)


class _Encoder(Module):
    def __init__(self, rng, transition_dim, channels, embed_dim, kernel_size, groups):
        self.depth = len(channels) - 1
        widths = [transition_dim, *channels]
        self.blocks = [
            ResidualBlock(rng, widths[l], widths[l + 1], embed_dim, kernel_size, groups)
            for l in range(self.depth)
        ]
        self.downs = [Resample(rng, channels[l], up=False) for l in range(self.depth)]

    def __call__(self, x, features):
        skips = []
        for block, down in zip(self.blocks, self.downs):
            x = block(x, features)
            skips.append(x)
            x = down(x)
        return x, skips


def check_horizon(horizon: int, depth: int) -> None:
    factor = 2 ** depth
    if horizon < factor or horizon % factor:
        raise ShapeError(
            f"horizon {horizon} must be a positive multiple of {factor} (divisible by 2^depth, depth={depth})",
            horizon=horizon,
            depth=depth,
        )


class DenoiserNet(Module):
    """Predicts the injected noise from a noised trajectory and its step index.

    With ``channels=(c0, c1, c2)`` the net has two encoder blocks, two
    bottleneck blocks and two decoder blocks; decoder inputs concatenate the
    upsampled features with the matching encoder activation.
    """

    def __init__(
        self,
        transition_dim: int,
        channels=(32, 64, 128),
        embed_dim: int = 32,
        kernel_size: int = 5,
        groups: int = 8,
        seed: int = 0,
    ):
        if len(channels) < 2:
            raise ValueError("need at least two channel widths")
        rng = np.random.default_rng(seed)
        self.transition_dim = transition_dim
        self.channels = tuple(int(c) for c in channels)
        self.embed_dim = embed_dim
        self.kernel_size = kernel_size
        self.groups = groups
        self.depth = len(channels) - 1
        self.encoder = _Encoder(rng, transition_dim, self.channels, embed_dim, kernel_size, groups)
        c = self.channels
        self.mid = [
            ResidualBlock(rng, c[-2], c[-1], embed_dim, kernel_size, groups),
            ResidualBlock(rng, c[-1], c[-1], embed_dim, kernel_size, groups),
        ]
        self.ups = [Resample(rng, c[l + 1], up=True) for l in reversed(range(self.depth))]
        self.decoder = [
            ResidualBlock(rng, c[l + 1] + c[l], c[l], embed_dim, kernel_size, groups)
            for l in reversed(range(self.depth))
        ]
        self.final = Conv1d(rng, c[0], transition_dim, 1)

    def check_horizon(self, horizon: int) -> None:
        check_horizon(horizon, self.depth)

    def __call__(self, x: Tensor, steps) -> Tensor:
        return denoiser_forward(self, x, steps)


def _check_input(net, x: Tensor, steps) -> np.ndarray:
    if x.ndim != 3 or x.shape[1] != net.transition_dim:
        raise ShapeError(
            "expected input [batch, transition_dim, T]",
            shape=x.shape,
            transition_dim=net.transition_dim,
        )
    check_horizon(x.shape[2], net.depth)
    steps = np.broadcast_to(np.asarray(steps), (x.shape[0],))
    return steps


def denoiser_forward(net: DenoiserNet, x: Tensor, steps) -> Tensor:
    steps = _check_input(net, x, steps)
    features = Tensor(sinusoidal_features(steps, net.embed_dim))
    h, skips = net.encoder(x, features)
    for block in net.mid:
        h = block(h, features)
    for up, block, skip in zip(net.ups, net.decoder, reversed(skips)):
        h = block(ad.concat([up(h), skip], axis=1), features)
    return net.final(h)


class ValueNet(Module):
    """Encoder half of the U-Net, mean-pooled over time, then a scalar head."""

    def __init__(
        self,
        transition_dim: int,
        channels=(32, 64, 128),
        embed_dim: int = 32,
        kernel_size: int = 5,
        groups: int = 8,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.transition_dim = transition_dim
        self.channels = tuple(int(c) for c in channels)
        self.embed_dim = embed_dim
        self.kernel_size = kernel_size
        self.groups = groups
        self.depth = len(channels) - 1
        self.encoder = _Encoder(rng, transition_dim, self.channels, embed_dim, kernel_size, groups)
        self.mid = ResidualBlock(rng, self.channels[-2], self.channels[-1], embed_dim, kernel_size, groups)
        self.head = Linear(rng, self.channels[-1], 1)

    def check_horizon(self, horizon: int) -> None:
        check_horizon(horizon, self.depth)

    def __call__(self, x: Tensor, steps) -> Tensor:
        return value_forward(self, x, steps)


def value_forward(net: ValueNet, x: Tensor, steps) -> Tensor:
    """Predicted return per trajectory, shape ``[B]``."""
    steps = _check_input(net, x, steps)
    features = Tensor(sinusoidal_features(steps, net.embed_dim))
    h, _ = net.encoder(x, features)
    h = net.mid(h, features)
    pooled = ad.mean_axis(h, axis=2)
    return ad.reshape(net.head(pooled), (x.shape[0],))
