"""Differentiable operations on :class:`~dvice.numerics.tensor.Tensor`.

Image tensors use the N x C x H x W layout.  Each op computes its forward
value with numpy and attaches a closure mapping the output gradient to one
gradient per parent (``None`` where a parent needs none).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

PROB_EPS = 1e-7
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op}: expected N x C x H x W input, got shape {x.shape}")


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(out, (a, b), backward, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    out = a.data * a.data.dtype.type(factor)

    def backward(g):
        return (g * a.data.dtype.type(factor),)

    return Tensor._result(out, (a,), backward, "scale")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype).reshape(())

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(out, (a,), backward, "sum")


def mean_batch(a: Tensor) -> Tensor:
    """Average over axis 0, keeping it as an extent-1 axis."""
    n = a.shape[0]
    out = a.data.mean(axis=0, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Tensor._result(out, (a,), backward, "mean_batch")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._result(out, (a,), backward, "reshape")


def index(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing; the result is a copy."""
    out = np.array(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return Tensor._result(out, (a,), backward, "index")


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return Tensor._result(out, (a,), backward, "broadcast_to")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient is zero where clipping was active."""
    out = np.clip(a.data, lo, hi)

    def backward(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return Tensor._result(out, (a,), backward, "clamp")


def split_channels(a: Tensor, at: int):
    """Split along axis 1 into ``[:at]`` and ``[at:]``."""
    return index(a, (slice(None), slice(0, at))), index(a, (slice(None), slice(at, None)))


def concat_batch(tensors) -> Tensor:
    """Stack along axis 0."""
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=0)
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return Tensor._result(out, tuple(tensors), backward, "concat_batch")


def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_channels: nothing to concatenate")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return Tensor._result(out, tuple(tensors), backward, "concat_channels")


# ---------------------------------------------------------------- pointwise

def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    # keep the open interval even where the float rounds to 0 or 1
    one = x.dtype.type(1)
    out = np.clip(out, np.finfo(x.dtype).tiny, np.nextafter(one, x.dtype.type(0)))

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (a,), backward, "sigmoid")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g):
        return (g * (a.data > 0),)

    return Tensor._result(out, (a,), backward, "relu")


def elu(a: Tensor) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise; continuously differentiable at 0."""
    x = a.data
    neg = np.expm1(np.minimum(x, 0))
    out = np.where(x > 0, x, neg)

    def backward(g):
        return (g * np.where(x > 0, 1, neg + 1),)

    return Tensor._result(out, (a,), backward, "elu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor._result(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise ValueError("log: non-positive input")
    x = np.maximum(a.data, a.data.dtype.type(PROB_EPS))

    def backward(g):
        return (g / x,)

    return Tensor._result(np.log(x), (a,), backward, "log")


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "relu": relu,
    "elu": elu,
    "exp": exp,
    "log": log,
    "add": add,
    "mul": mul,
    "concat_channels": lambda *ts: concat_channels(ts),
}


def elementwise(fn: str, *inputs: Tensor) -> Tensor:
    """Dispatch by name: sigmoid, relu, exp, log, add, mul, concat_channels."""
    try:
        op = _ELEMENTWISE[fn]
    except KeyError:
        raise ValueError(f"unknown elementwise fn {fn!r}") from None
    return op(*inputs)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample standardisation over all non-batch axes (no affine parameters)."""
    axes = tuple(range(1, x.ndim))
    count = int(np.prod(x.shape[1:]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * out).sum(axis=axes, keepdims=True) / count
        return (inv * (g - gm - out * gxm),)

    return Tensor._result(out.astype(x.dtype, copy=False), (x,), backward, "layer_norm")


# ---------------------------------------------------------------- linear maps

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight inner {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        return g @ weight.data, g2.T @ x2, g2.sum(axis=0)

    return Tensor._result(out, (x, weight, bias), backward, "linear")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col.

    ``x`` is N x C x H x W, ``kernel`` is O x C x kH x kW, ``bias`` has O entries.
    """
    _require_4d(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise ValueError(f"conv2d: kernel {kernel.shape} does not match input {x.shape}")
    if bias.shape != (kernel.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({kernel.shape[0]},)")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: need stride >= 1 and padding >= 0")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # rows: (n, ho, wo); cols: (c, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(o, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    pshape = xp.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dk = (g2.T @ cols).reshape(kernel.shape)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros(pshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dk, db

    return Tensor._result(out, (x, kernel, bias), backward, "conv2d")


# ---------------------------------------------------------------- pooling / resampling

def pool_spatial(x: Tensor, mode: str = "avg", global_: bool = True) -> Tensor:
    """Spatial pooling: global (-> N x C x 1 x 1) or 2x2 with stride 2."""
    _require_4d(x, "pool_spatial")
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise ValueError("pool_spatial: empty spatial axis")
    if mode not in ("avg", "max"):
        raise ValueError(f"pool_spatial: unknown mode {mode!r}")
    if global_:
        flat = x.data.reshape(n, c, h * w)
        if mode == "avg":
            out = flat.mean(axis=2).reshape(n, c, 1, 1)

            def backward(g):
                return (np.broadcast_to(g / (h * w), x.shape).copy(),)
        else:
            arg = flat.argmax(axis=2)
            out = np.take_along_axis(flat, arg[..., None], axis=2).reshape(n, c, 1, 1)

            def backward(g):
                dx = np.zeros((n, c, h * w), dtype=g.dtype)
                np.put_along_axis(dx, arg[..., None], g.reshape(n, c, 1), axis=2)
                return (dx.reshape(x.shape),)

        return Tensor._result(out, (x,), backward, f"global_{mode}_pool")

    if h % 2 or w % 2:
        raise ValueError("pool_spatial: 2x2 pooling needs even spatial extents")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    if mode == "avg":
        out = blocks.mean(axis=-1)

        def backward(g):
            return (np.repeat(np.repeat(g / 4, 2, axis=2), 2, axis=3),)
    else:
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

        def backward(g):
            d = np.zeros(blocks.shape, dtype=g.dtype)
            np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
            d = d.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
            return (d,)

    return Tensor._result(np.ascontiguousarray(out), (x,), backward, f"{mode}_pool2x2")


def pool_channel(x: Tensor, mode: str = "avg") -> Tensor:
    """Pool across channels: N x C x H x W -> N x 1 x H x W."""
    _require_4d(x, "pool_channel")
    c = x.shape[1]
    if c == 0:
        raise ValueError("pool_channel: empty channel axis")
    if mode == "avg":
        out = x.data.mean(axis=1, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g / c, x.shape).copy(),)
    elif mode == "max":
        arg = x.data.argmax(axis=1)[:, None]
        out = np.take_along_axis(x.data, arg, axis=1)

        def backward(g):
            dx = np.zeros_like(x.data)
            np.put_along_axis(dx, arg, g, axis=1)
            return (dx,)
    else:
        raise ValueError(f"pool_channel: unknown mode {mode!r}")
    return Tensor._result(out, (x,), backward, f"channel_{mode}_pool")


def upsample_nearest2x(x: Tensor) -> Tensor:
    _require_4d(x, "upsample_nearest2x")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._result(out, (x,), backward, "upsample_nearest2x")


# ---------------------------------------------------------------- losses

def bce_loss(pred: Tensor, target) -> Tensor:
    """Summed binary cross-entropy of probabilities against a {0,1} target.

    Probabilities are clamped to [eps, 1-eps] in the value and in the
    gradient formula; the gradient is not gated by the clamp, so saturated
    wrong predictions still receive a signal.
    """
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if y.shape != pred.shape:
        raise ValueError(f"bce_loss: shape mismatch {pred.shape} vs {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("bce_loss: target must be binary")
    dt = pred.data.dtype.type
    y = y.astype(pred.data.dtype, copy=False)
    p = np.clip(pred.data, dt(PROB_EPS), dt(1 - PROB_EPS))
    out = -(y * np.log(p) + (1 - y) * np.log1p(-p)).sum(dtype=np.float64)
    out = np.asarray(out, dtype=pred.data.dtype).reshape(())

    def backward(g):
        return ((g * (p - y) / (p * (1 - p))).astype(pred.data.dtype, copy=False),)

    return Tensor._result(out, (pred,), backward, "bce_loss")


def gaussian_kl(mean: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over all elements.

    ``logvar`` is clamped to [-10, 10] before exponentiation.
    """
    if mean.shape != logvar.shape:
        raise ValueError(f"gaussian_kl: shape mismatch {mean.shape} vs {logvar.shape}")
    lv = np.clip(logvar.data, LOGVAR_MIN, LOGVAR_MAX)
    var_m1 = np.expm1(lv)
    # exp(lv) - 1 - lv >= 0 exactly; clip away rounding below zero
    out = 0.5 * (mean.data ** 2 + np.maximum(var_m1 - lv, 0)).sum(dtype=np.float64)
    out = np.asarray(out, dtype=mean.data.dtype).reshape(())

    def backward(g):
        inside = (logvar.data >= LOGVAR_MIN) & (logvar.data <= LOGVAR_MAX)
        return g * mean.data, g * 0.5 * var_m1 * inside

    return Tensor._result(out, (mean, logvar), backward, "gaussian_kl")
