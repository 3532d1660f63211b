"""The directed variational cross-encoder.

A shared convolutional encoder maps every image to a Gaussian posterior
over a small latent map.  Guide images are reduced to a prototype (the
average of their channel-attended posterior means); each co-seg latent is
channel-attended, concatenated with the prototype and decoded to a mask,
with spatially gated skip connections from the co-seg image's encoder.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .attention import ChamParams, SpamParams, cham_apply, spam_apply, spam_kernel_size
from .numerics import Tensor

LATENT_SIZE = 2


@dataclass(frozen=True)
class BackboneConfig:
    """Encoder/decoder geometry.

    ``widths`` lists the stride-2 encoder stage channels; the decoder mirrors
    them with the same number of upsampling stages.  The latent map is
    always ``LATENT_SIZE`` x ``LATENT_SIZE``.
    """

    input_size: int = 64
    widths: Tuple[int, ...] = (16, 32, 64, 64, 64)
    latent_channels: int = 32
    reduction: int = 4
    use_cham: bool = True
    use_spam: bool = True
    activation: str = "relu"
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise ValueError("need at least one encoder stage")
        if self.input_size != LATENT_SIZE * 2 ** self.stages:
            raise ValueError(
                f"input size {self.input_size} with {self.stages} stages does not reach a "
                f"{LATENT_SIZE}x{LATENT_SIZE} latent map")
        if self.activation not in ("relu", "elu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.latent_channels < 1 or min(self.widths) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def stages(self) -> int:
        return len(self.widths)

    @property
    def decoder_widths(self) -> Tuple[int, ...]:
        return tuple(self.widths[-2::-1]) + (self.widths[0],)

    @classmethod
    def reduced(cls, **overrides) -> "BackboneConfig":
        """A 16x16, three-stage configuration for gradient checks and fast tests."""
        base = dict(input_size=16, widths=(4, 6, 8), latent_channels=4, reduction=2)
        base.update(overrides)
        return cls(**base)


class LatentDistribution(NamedTuple):
    """Diagonal Gaussian posterior, batched: mean and logvar are N x C_z x 2 x 2."""

    mean: Tensor
    logvar: Tensor


class Prototype(NamedTuple):
    attended_mean: Tensor  # 1 x C_z x 2 x 2
    pooled_logvar: Tensor  # 1 x C_z x 2 x 2


class ModelParams:
    """Flat, ordered collection of named parameter tensors plus the config."""

    def __init__(self, config: BackboneConfig, tensors: Dict[str, Tensor]):
        self.config = config
        self.tensors = dict(tensors)
        self._check()

    def _check(self):
        for name, shape in expected_shapes(self.config).items():
            t = self.tensors.get(name)
            if t is None:
                raise ValueError(f"missing parameter {name}")
            if t.shape != shape:
                raise ValueError(f"parameter {name} has shape {t.shape}, expected {shape}")
        extra = set(self.tensors) - set(expected_shapes(self.config))
        if extra:
            raise ValueError(f"unexpected parameters {sorted(extra)}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def cham(self) -> ChamParams:
        t = self.tensors
        return ChamParams(t["cham.w1"], t["cham.b1"], t["cham.w2"], t["cham.b2"])

    def spam(self, stage: int) -> SpamParams:
        return SpamParams(self.tensors[f"spam{stage}.weight"], self.tensors[f"spam{stage}.bias"])

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k, dtype=v.dtype)
            for k, v in self.tensors.items()})

    def zero_grad(self) -> None:
        nx.zero_grad(self.tensors.values())

    @classmethod
    def init(cls, config: BackboneConfig, rng: np.random.Generator, dtype=None) -> "ModelParams":
        """Glorot-uniform weights, zero biases."""
        dtype = dtype or nx.default_dtype()
        tensors = {}
        for name, shape in expected_shapes(config).items():
            if name.rsplit(".", 1)[-1].startswith("b"):
                data = np.zeros(shape, dtype)
            else:
                data = nx.glorot_uniform(shape, rng, dtype)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, tensors)

    @classmethod
    def zeros(cls, config: BackboneConfig, dtype=None) -> "ModelParams":
        dtype = dtype or nx.default_dtype()
        return cls(config, {n: Tensor(np.zeros(s, dtype), requires_grad=True, name=n)
                            for n, s in expected_shapes(config).items()})


def expected_shapes(cfg: BackboneConfig) -> Dict[str, tuple]:
    """Parameter names and shapes, in canonical (checkpoint) order."""
    shapes: Dict[str, tuple] = {}
    cin = 3
    for i, w in enumerate(cfg.widths, start=1):
        shapes[f"enc{i}.weight"] = (w, cin, 3, 3)
        shapes[f"enc{i}.bias"] = (w,)
        cin = w
    shapes["enc_head.weight"] = (2 * cfg.latent_channels, cin, 1, 1)
    shapes["enc_head.bias"] = (2 * cfg.latent_channels,)
    if cfg.use_cham:
        c = cfg.latent_channels
        hidden = max(1, -(-c // cfg.reduction))
        shapes.update({"cham.w1": (hidden, c), "cham.b1": (hidden,),
                       "cham.w2": (c, hidden), "cham.b2": (c,)})
    if cfg.use_spam:
        for i in range(1, cfg.stages):
            k = spam_kernel_size(cfg.input_size >> i)
            shapes[f"spam{i}.weight"] = (1, 2, k, k)
            shapes[f"spam{i}.bias"] = (1,)
    cin = 2 * cfg.latent_channels
    for i, w in enumerate(cfg.decoder_widths, start=1):
        skip = cfg.stages - i
        if skip >= 1:
            cin += cfg.widths[skip - 1]
        shapes[f"dec{i}.weight"] = (w, cin, 3, 3)
        shapes[f"dec{i}.bias"] = (w,)
        cin = w
    shapes["head.weight"] = (1, cin, 1, 1)
    shapes["head.bias"] = (1,)
    return shapes


def _as_batch(images) -> Tensor:
    if isinstance(images, Tensor):
        return images
    arr = np.stack(list(images)) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


def _block(h: Tensor, params: ModelParams, name: str, stride: int) -> Tensor:
    """conv 3x3 -> (layer norm) -> activation."""
    cfg = params.config
    h = nx.conv2d(h, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=1)
    if cfg.normalize:
        h = nx.layer_norm(h)
    return nx.elu(h) if cfg.activation == "elu" else nx.relu(h)


def encode(x, params: ModelParams) -> Tuple[LatentDistribution, List[Tensor]]:
    """Encode a batch of images (N x 3 x S x S) to posteriors and skip features.

    Skips are the outputs of encoder stages 1..S-1 (highest resolution first).
    """
    cfg = params.config
    x = _as_batch(x)
    if x.ndim != 4 or x.shape[1:] != (3, cfg.input_size, cfg.input_size):
        raise ValueError(f"encode: expected N x 3 x {cfg.input_size} x {cfg.input_size}, got {x.shape}")
    skips = []
    h = x
    for i in range(1, cfg.stages + 1):
        h = _block(h, params, f"enc{i}", stride=2)
        if i < cfg.stages:
            skips.append(h)
    head = nx.conv2d(h, params["enc_head.weight"], params["enc_head.bias"])
    mean, logvar = nx.split_channels(head, cfg.latent_channels)
    logvar = nx.clamp(logvar, nx.ops.LOGVAR_MIN, nx.ops.LOGVAR_MAX)
    return LatentDistribution(mean, logvar), skips


def reparameterize(d: LatentDistribution, noise=None, mode: str = "train") -> Tensor:
    """Single-sample draw ``mean + exp(logvar/2) * eps``; eval mode returns the mean.

    ``noise`` is either a numpy Generator or an explicit eps array.
    """
    if mode == "eval":
        return d.mean
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if isinstance(noise, np.random.Generator):
        eps = noise.standard_normal(d.mean.shape)
    elif noise is None:
        raise ValueError("train mode needs a noise source")
    else:
        eps = np.asarray(noise)
        if eps.shape != d.mean.shape:
            raise ValueError(f"noise shape {eps.shape} != latent shape {d.mean.shape}")
    std = nx.exp(nx.scale(d.logvar, 0.5))
    return nx.add(d.mean, nx.mul(std, Tensor(eps, dtype=d.mean.dtype)))


def _attend(z: Tensor, params: ModelParams) -> Tensor:
    return cham_apply(z, params.cham()) if params.config.use_cham else z


def _order_invariant_mean(t: Tensor) -> Tensor:
    """Mean over the batch axis whose value does not depend on batch order.

    Summing the elementwise-sorted stack fixes the float summation order;
    the gradient of a mean is order-free anyway.
    """
    n = t.shape[0]
    out = (np.sort(t.data, axis=0).sum(axis=0, keepdims=True) / n).astype(t.dtype)

    def backward(g):
        return (np.broadcast_to(g / n, t.shape).copy(),)

    return Tensor._result(out, (t,), backward, "mean_batch")


def _canonical_order(images: np.ndarray) -> np.ndarray:
    keys = [hashlib.sha1(np.ascontiguousarray(im).tobytes()).digest() for im in images]
    return np.argsort(np.array(keys, dtype=object), kind="stable")


def prototype_from_latents(latents: LatentDistribution, params: ModelParams) -> Prototype:
    attended = _attend(latents.mean, params)
    return Prototype(_order_invariant_mean(attended), _order_invariant_mean(latents.logvar))


def compute_prototype(guide_images, params: ModelParams) -> Prototype:
    """Average of channel-attended posterior means over the guide set.

    The guide is encoded in a content-defined order, so the result is
    bitwise independent of the order the caller supplies.
    """
    batch = _as_batch(guide_images).data
    if batch.shape[0] < 1:
        raise ValueError("compute_prototype: empty guide set")
    batch = batch[_canonical_order(batch)]
    latents, _ = encode(Tensor(batch), params)
    return prototype_from_latents(latents, params)


def decode(z_attended: Tensor, proto: Prototype, skips: Sequence[Tensor], params: ModelParams) -> Tensor:
    """Decode attended latents (m x C_z x 2 x 2) to mask probabilities (m x 1 x S x S)."""
    cfg = params.config
    m = z_attended.shape[0]
    if z_attended.shape[1:] != (cfg.latent_channels, LATENT_SIZE, LATENT_SIZE):
        raise ValueError(f"decode: latent shape {z_attended.shape} does not match config")
    if proto.attended_mean.shape[1:] != z_attended.shape[1:]:
        raise ValueError("decode: prototype shape does not match latents")
    if len(skips) != cfg.stages - 1:
        raise ValueError(f"decode: expected {cfg.stages - 1} skips, got {len(skips)}")
    proto_b = nx.broadcast_to(proto.attended_mean, z_attended.shape)
    h = nx.concat_channels([z_attended, proto_b])
    for i in range(1, cfg.stages + 1):
        h = nx.upsample_nearest2x(h)
        skip_idx = cfg.stages - i
        if skip_idx >= 1:
            s = skips[skip_idx - 1]
            if s.shape[0] != m or s.shape[2:] != h.shape[2:]:
                raise ValueError(f"decode: skip {skip_idx} has shape {s.shape}, decoder at {h.shape}")
            if cfg.use_spam:
                s = spam_apply(s, params.spam(skip_idx))
            h = nx.concat_channels([h, s])
        h = _block(h, params, f"dec{i}", stride=1)
    return nx.sigmoid(nx.conv2d(h, params["head.weight"], params["head.bias"]))


class EpisodeForward(NamedTuple):
    masks: Tensor  # m x 1 x S x S probabilities
    latents: LatentDistribution  # co-seg posteriors
    prototype: Prototype


def forward_episode(guide, coseg, params: ModelParams, mode: str = "eval", noise=None) -> EpisodeForward:
    """Full pipeline for one episode; guide images act only through the prototype."""
    proto = compute_prototype(guide, params)
    latents, skips = encode(coseg, params)
    z = reparameterize(latents, noise, mode)
    masks = decode(_attend(z, params), proto, skips, params)
    return EpisodeForward(masks, latents, proto)


def segment_episode(guide, coseg, params: ModelParams, mode: str = "eval", noise=None) -> List[np.ndarray]:
    """Mask probabilities (S x S arrays), one per co-seg image."""
    guide_b, coseg_b = _as_batch(guide), _as_batch(coseg)
    if guide_b.shape[0] < 1 or coseg_b.shape[0] < 1:
        raise ValueError("segment_episode: guide and co-seg sets must be non-empty")
    with nx.no_grad():
        out = forward_episode(guide_b, coseg_b, params, mode, noise)
    return [m[0] for m in out.masks.data]


def dvice_loss(pred_masks: Tensor, target_masks, latents: LatentDistribution, proto: Prototype,
               weights: Tuple[float, float] = (1.0, 1.0)) -> Tensor:
    """Summed mask BCE + beta_proto * KL(prototype) + beta_latent * sum_j KL(latent_j).

    Both KL terms are against a standard normal prior.
    """
    target = target_masks.data if isinstance(target_masks, Tensor) else np.asarray(target_masks)
    if isinstance(latents, (list, tuple)) and not isinstance(latents, LatentDistribution):
        latents = LatentDistribution(nx.concat_batch([l.mean for l in latents]),
                                     nx.concat_batch([l.logvar for l in latents]))
    m = pred_masks.shape[0]
    if target.shape[0] != m or latents.mean.shape[0] != m:
        raise ValueError(
            f"dvice_loss: {m} predictions, {target.shape[0]} targets, {latents.mean.shape[0]} latents")
    target = target.reshape(pred_masks.shape)
    beta_proto, beta_latent = weights
    loss = nx.bce_loss(pred_masks, target)
    if beta_proto:
        loss = nx.add(loss, nx.scale(nx.gaussian_kl(proto.attended_mean, proto.pooled_logvar), beta_proto))
    if beta_latent:
        loss = nx.add(loss, nx.scale(nx.gaussian_kl(latents.mean, latents.logvar), beta_latent))
    return loss


@dataclass
class BinarizedMask:
    """Binary mask (uint8 0/1); ``no_foreground`` marks a blank result."""

    mask: np.ndarray
    no_foreground: bool = False


def binarize(prob_mask, tau_b: float = 0.5, tau_nf: float = 0.1) -> BinarizedMask:
    """Threshold at ``tau_b``; a mean probability below ``tau_nf`` yields a blank mask."""
    p = np.asarray(prob_mask.data if isinstance(prob_mask, Tensor) else prob_mask)
    if p.mean() < tau_nf:
        return BinarizedMask(np.zeros(p.shape, np.uint8), True)
    return BinarizedMask((p >= tau_b).astype(np.uint8), False)


def without_attention(config: BackboneConfig, no_cham: bool = False, no_spam: bool = False) -> BackboneConfig:
    return replace(config, use_cham=config.use_cham and not no_cham,
                   use_spam=config.use_spam and not no_spam)
