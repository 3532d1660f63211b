"""Channel (ChAM) and spatial (SpAM) attention blocks.

Both are CBAM-style gates.  Parameters are held in plain dicts of
tensors so they can live inside a model's flat parameter namespace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import numerics as nx
from .numerics import Tensor

DEFAULT_REDUCTION = 4


@dataclass
class ChamParams:
    """Shared two-layer perceptron C -> ceil(C/r) -> C.

    ``activation`` is the hidden nonlinearity: "relu" (default) or
    "identity", which makes the perceptron a plain affine map.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown ChAM activation {self.activation!r}")

    @property
    def channels(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, reduction: int = DEFAULT_REDUCTION,
             dtype=None, activation: str = "relu") -> "ChamParams":
        dtype = dtype or nx.default_dtype()
        hidden = max(1, math.ceil(channels / reduction))
        return cls(
            w1=Tensor(nx.glorot_uniform((hidden, channels), rng, dtype), requires_grad=True),
            b1=Tensor(np.zeros(hidden, dtype), requires_grad=True),
            w2=Tensor(nx.glorot_uniform((channels, hidden), rng, dtype), requires_grad=True),
            b2=Tensor(np.zeros(channels, dtype), requires_grad=True),
            activation=activation,
        )

    def named(self) -> Dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class SpamParams:
    """A 2-in / 1-out convolution with odd kernel size and 'same' padding."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        k = self.weight.shape[-1]
        if self.weight.shape[:2] != (1, 2) or k % 2 == 0 or self.weight.shape[-2] != k:
            raise ValueError(f"SpAM kernel must be 1x2xkxk with odd k, got {self.weight.shape}")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    @classmethod
    def init(cls, kernel_size: int, rng: np.random.Generator, dtype=None) -> "SpamParams":
        dtype = dtype or nx.default_dtype()
        return cls(
            weight=Tensor(nx.glorot_uniform((1, 2, kernel_size, kernel_size), rng, dtype), requires_grad=True),
            bias=Tensor(np.zeros(1, dtype), requires_grad=True),
        )

    def named(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def spam_kernel_size(resolution: int) -> int:
    """7x7 at 16x16 and above, 3x3 on smaller maps."""
    return 7 if resolution >= 16 else 3


def _mlp(v: Tensor, p: ChamParams) -> Tensor:
    h = nx.linear(v, p.w1, p.b1)
    if p.activation == "relu":
        h = nx.relu(h)
    return nx.linear(h, p.w2, p.b2)


def cham_weights(z: Tensor, p: ChamParams) -> Tensor:
    """Per-channel gates ``sigmoid(mlp(avg) + mlp(max))``, shape N x C x 1 x 1."""
    if z.ndim != 4 or z.shape[1] != p.channels:
        raise ValueError(f"cham: feature shape {z.shape} does not match {p.channels} channels")
    n, c = z.shape[:2]
    z_avg = nx.reshape(nx.pool_spatial(z, "avg"), (n, c))
    z_max = nx.reshape(nx.pool_spatial(z, "max"), (n, c))
    gate = nx.sigmoid(nx.add(_mlp(z_avg, p), _mlp(z_max, p)))
    return nx.reshape(gate, (n, c, 1, 1))


def cham_apply(z: Tensor, p: ChamParams) -> Tensor:
    """Channel-rescaled features ``W_c * z`` (shape preserved)."""
    return nx.mul(z, cham_weights(z, p))


def spam_map(f: Tensor, p: SpamParams) -> Tensor:
    """Per-pixel gate ``sigmoid(conv([avg_c(F); max_c(F)]))``, shape N x 1 x H x W."""
    if f.ndim != 4 or f.shape[1] < 1:
        raise ValueError(f"spam: expected N x C x H x W with C >= 1, got {f.shape}")
    pooled = nx.concat_channels([nx.pool_channel(f, "avg"), nx.pool_channel(f, "max")])
    pad = (p.kernel_size - 1) // 2
    return nx.sigmoid(nx.conv2d(pooled, p.weight, p.bias, stride=1, padding=pad))


def spam_apply(f: Tensor, p: SpamParams) -> Tensor:
    return nx.mul(f, spam_map(f, p))
