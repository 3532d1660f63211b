"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad, zero_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Euclidean norm over the whole tensor."""
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(np.asarray(analytic, np.float64) - numeric)) / denom


def check_gradients(fn: Callable[[], Tensor], tensors: Mapping[str, Tensor], step: float,
                    rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """Relative error between backprop and central differences, per named tensor.

    A non-scalar output is reduced to ``sum(out * w)`` with fixed random
    weights ``w``.  The finite-difference side does that reduction in
    float64, so only the op itself contributes rounding noise.
    """
    with no_grad():
        shape = fn().shape
    if int(np.prod(shape)) == 1:
        w = np.ones(shape)
    else:
        w = (rng or np.random.default_rng(0)).normal(size=shape)

    def value() -> float:
        return float(np.sum(np.asarray(fn().data, np.float64) * w))

    zero_grad(tensors.values())
    out = fn()
    backward(ops.sum_all(ops.mul(out, Tensor(w, dtype=out.dtype))))
    errors = {}
    for name, t in tensors.items():
        numeric = np.zeros(t.shape)
        with no_grad():
            for i in np.ndindex(t.shape):
                orig = t.data[i]
                t.data[i] = orig + step
                up, hi = float(t.data[i]), value()
                t.data[i] = orig - step
                down, lo = float(t.data[i]), value()
                t.data[i] = orig
                # the step actually taken after rounding to the tensor dtype
                numeric[i] = (hi - lo) / (up - down)
        errors[name] = relative_error(t.grad, numeric)
    return errors
