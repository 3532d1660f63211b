"""SGD with heavy-ball momentum and Glorot initialisation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params: Mapping[str, Tensor], state: OptimizerState) -> None:
    """In-place update ``v <- momentum*v - lr*g``; ``w <- w + v``.

    Velocities are created lazily (zeros) and kept in ``state.velocity``.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"sgd_step: missing gradient for {missing}")
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ValueError(f"sgd_step: velocity shape {v.shape} != param shape {p.data.shape} for {name}")
        dt = p.data.dtype.type
        v *= dt(state.momentum)
        v -= dt(state.learning_rate) * p.grad
        p.data += v


def glorot_uniform(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform in +-sqrt(6/(fan_in+fan_out)); receptive field counts for conv kernels."""
    if len(shape) == 2:
        fan_out, fan_in = shape
    else:
        receptive = int(np.prod(shape[2:]))
        fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
