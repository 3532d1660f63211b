"""Tensor algebra, reverse-mode differentiation and the SGD optimizer."""

from .ops import (
    add,
    bce_loss,
    broadcast_to,
    clamp,
    concat_batch,
    concat_channels,
    conv2d,
    elementwise,
    elu,
    exp,
    gaussian_kl,
    index,
    layer_norm,
    linear,
    log,
    mean_batch,
    mul,
    pool_channel,
    pool_spatial,
    relu,
    reshape,
    scale,
    sigmoid,
    split_channels,
    sub,
    sum_all,
    upsample_nearest2x,
)
from .optim import OptimizerState, glorot_uniform, sgd_step
from .tensor import (
    GraphError,
    NonFiniteError,
    Tensor,
    backward,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
    zero_grad,
)

__all__ = [name for name in dir() if not name.startswith("_")]
