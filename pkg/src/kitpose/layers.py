"""Parameterized building blocks: linear maps, convolutions, normalization.

Each block owns its parameter tensors and exposes them through
``named_params`` so the optimizer and checkpoint code can address every
tensor by a stable dotted name.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["trunc_normal", "he_normal", "Linear", "Conv2dLayer", "LayerNorm",
           "ChannelNorm"]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples with |x| > 2 std redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear:
    """y = x @ W.T + b for row-stacked inputs [K, in_dim]."""

    def __init__(self, rng, in_dim: int, out_dim: int, bias: bool = True,
                 std: float = 0.02):
        self.weight = Tensor(trunc_normal(rng, (out_dim, in_dim), std), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, T.transpose(self.weight))
        if self.bias is not None:
            out = out + self.bias
        return out

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class Conv2dLayer:
    """Square-kernel convolution over [c_in, h, w] feature stacks."""

    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 1, pad: int | None = None):
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(he_normal(rng, (c_out, c_in, kernel, kernel), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, bias=self.bias, stride=self.stride,
                        pad=self.pad)

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class LayerNorm:
    """Normalization over the trailing feature axis with learnable affine."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = T.mean(centered * centered, axis=-1, keepdims=True)
        inv = T.power(var + self.eps, -0.5)
        return centered * inv * self.gain + self.bias

    def named_params(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class ChannelNorm:
    """Per-channel normalization over the spatial extent of one instance.

    Plays the batch-norm role inside conv stacks while keeping forward
    passes deterministic and state-free (no running statistics).
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.mean(x, axis=(1, 2), keepdims=True)
        centered = x - mu
        var = T.mean(centered * centered, axis=(1, 2), keepdims=True)
        inv = T.power(var + self.eps, -0.5)
        g = T.reshape(self.gain, (x.shape[0], 1, 1))
        b = T.reshape(self.bias, (x.shape[0], 1, 1))
        return centered * inv * g + b

    def named_params(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias
