"""Episodic training, fine-tuning and the binary checkpoint format.

Two independent random streams drive a run: one samples and augments
episodes, the other draws reparameterisation noise.  Both are derived from
the run seed and both are saved in every checkpoint, so a resumed run
continues on exactly the trajectory it would have followed.

The optimiser minimises the loss divided by the number of co-seg pixels.
The logged value is the undivided loss; dividing only rescales the
gradient, which keeps one learning rate usable across mask sizes.
"""

from __future__ import annotations

import itertools
import json
import queue
import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .episodes import Dataset, EpisodeConfig, EpisodeView, sample_episode
from .model import BackboneConfig, ModelParams, dvice_loss, expected_shapes, forward_episode, without_attention
from .numerics import NonFiniteError, Tensor

# the rate suited to a pretrained 224x224 backbone; too slow for training from scratch
PRETRAINED_LEARNING_RATE = 1e-5
MAGIC = b"DVICE001"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """The file exists but its contents are not a valid checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Unknown magic bytes or format version."""


class TrainingDiverged(RuntimeError):
    """The loss or an intermediate value became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 1e-2
    momentum: float = 0.9
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    beta_proto: float = 1.0
    beta_latent: float = 1.0
    no_cham: bool = False
    no_spam: bool = False
    seed: int = 0
    checkpoint_interval: int = 0  # 0 writes only the final checkpoint
    output_dir: Optional[str] = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    strict_deterministic: bool = True
    prefetch: int = 2

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint interval must be >= 0")
        if self.prefetch < 1:
            raise ValueError("prefetch depth must be >= 1")

    @property
    def model_config(self) -> BackboneConfig:
        return without_attention(self.backbone, self.no_cham, self.no_spam)


@dataclass
class Checkpoint:
    iteration: int
    params: ModelParams
    velocities: Dict[str, np.ndarray]
    rng_state: bytes = b""
    version: int = FORMAT_VERSION


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: List[Tuple[int, float]]


# --------------------------------------------------------------------- rng

def _streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    sampler, noise = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(sampler), np.random.default_rng(noise)


def _pack_rng(*gens: np.random.Generator) -> bytes:
    return json.dumps([g.bit_generator.state for g in gens], sort_keys=True).encode()


def _unpack_rng(blob: bytes) -> Tuple[np.random.Generator, ...]:
    try:
        states = json.loads(blob.decode())
        gens = []
        for st in states:
            g = np.random.default_rng()
            g.bit_generator.state = st
            gens.append(g)
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"unreadable RNG state: {exc}") from None
    return tuple(gens)


# -------------------------------------------------------------- checkpoint

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = list(expected_shapes(ckpt.params.config))
    out = [MAGIC, struct.pack("<IQI", ckpt.version, ckpt.iteration, len(names))]

    def put(name, arr):
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    for n in names:
        put(n, ckpt.params[n].data)
    for n in names:
        v = ckpt.velocities.get(n)
        put(n, np.zeros(ckpt.params[n].shape, np.float32) if v is None else v)
    out.append(struct.pack("<Q", len(ckpt.rng_state)) + ckpt.rng_state)
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> Tuple[str, np.ndarray]:
        (length,) = self.unpack("<H")
        try:
            name = self.take(length).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("parameter name is not UTF-8") from None
        (rank,) = self.unpack("<B")
        shape = self.unpack(f"<{rank}I")
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, values.astype(np.float32)


def config_from_shapes(shapes: Dict[str, tuple], base: Optional[BackboneConfig] = None) -> BackboneConfig:
    """Recover the geometry fields of a BackboneConfig from parameter shapes."""
    widths = []
    while f"enc{len(widths) + 1}.weight" in shapes:
        widths.append(shapes[f"enc{len(widths) + 1}.weight"][0])
    if not widths or "enc_head.weight" not in shapes:
        raise CheckpointError("checkpoint lacks encoder parameters")
    latent = shapes["enc_head.weight"][0] // 2
    use_cham = "cham.w1" in shapes
    reduction = latent // shapes["cham.w1"][0] if use_cham else (base.reduction if base else 4)
    fields = dict(input_size=2 * 2 ** len(widths), widths=tuple(widths), latent_channels=latent,
                  reduction=max(1, reduction), use_cham=use_cham, use_spam="spam1.weight" in shapes)
    try:
        return replace(base, **fields) if base else BackboneConfig(**fields)
    except ValueError as exc:
        raise CheckpointError(f"inconsistent parameter shapes: {exc}") from None


def load_checkpoint(path, config: Optional[BackboneConfig] = None) -> Checkpoint:
    """Read a checkpoint.  I/O failures raise OSError; bad contents raise CheckpointError.

    The geometry is recovered from parameter shapes; non-geometric options
    (activation, normalisation) come from ``config`` or the defaults.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointVersionError("not a checkpoint (bad magic bytes)")
    version, iteration, count = r.unpack("<IQI")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    params = dict(r.tensor() for _ in range(count))
    if len(params) != count:
        raise CheckpointError("duplicate parameter names")
    velocities = dict(r.tensor() for _ in range(count))
    if set(velocities) != set(params):
        raise CheckpointError("velocity names do not match parameter names")
    (blob_len,) = r.unpack("<Q")
    blob = r.take(blob_len)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after checkpoint")
    cfg = config_from_shapes({k: v.shape for k, v in params.items()}, config)
    try:
        model = ModelParams(cfg, {k: Tensor(v, requires_grad=True, name=k, dtype=np.float32)
                                  for k, v in params.items()})
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    for k, v in velocities.items():
        if v.shape != params[k].shape:
            raise CheckpointError(f"velocity {k} has shape {v.shape}, parameter {params[k].shape}")
    if blob:
        _unpack_rng(blob)
    return Checkpoint(iteration, model, velocities, blob, version)


def initial_checkpoint(cfg: TrainConfig) -> Checkpoint:
    """Parameters at iteration 0, initialised from the run seed."""
    init_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    params = ModelParams.init(cfg.model_config, init_rng, np.float32)
    return Checkpoint(0, params, {}, _pack_rng(*_streams(cfg.seed)))


# ------------------------------------------------------------------ loop

def _episodes(dataset: Dataset, classes: Sequence[str], ecfg: EpisodeConfig,
              rng: np.random.Generator) -> Iterator[Tuple[EpisodeView, dict]]:
    while True:
        view = sample_episode(dataset, classes, ecfg, rng).augmented(rng).view()
        yield view, rng.bit_generator.state


def _prefetched(source: Iterator, depth: int) -> Iterator:
    """Run ``source`` in a worker thread, at most ``depth`` items ahead."""
    q: "queue.Queue" = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def work():
        try:
            for item in source:
                while not stop.is_set():
                    try:
                        q.put((True, item), timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced in the consumer
            q.put((False, exc))

    worker = threading.Thread(target=work, daemon=True)
    worker.start()
    try:
        while True:
            ok, item = q.get()
            if not ok:
                raise item
            yield item
    finally:
        stop.set()


def _run(dataset: Optional[Dataset], classes: Sequence[str], cfg: TrainConfig, start: Checkpoint,
         log_path: Optional[Path] = None, fixed: Optional[EpisodeView] = None) -> TrainResult:
    params = start.params
    ecfg = cfg.episode
    opt = nx.OptimizerState(cfg.learning_rate, cfg.momentum,
                            {k: v.astype(np.float32).copy() for k, v in start.velocities.items()})
    sampler, noise = _unpack_rng(start.rng_state) if start.rng_state else _streams(cfg.seed)
    if fixed is not None:
        source = itertools.repeat((fixed, sampler.bit_generator.state))
    else:
        source = _episodes(dataset, classes, ecfg, sampler)
    if fixed is None and not cfg.strict_deterministic:
        source = _prefetched(source, cfg.prefetch)
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    losses: List[Tuple[int, float]] = []
    sampler_state = sampler.bit_generator.state
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    it = start.iteration
    try:
        while it < cfg.iterations:
            view, sampler_state = next(source)
            params.zero_grad()
            try:
                out = forward_episode(view.guide_images, view.coseg_images, params, "train", noise)
                loss = dvice_loss(out.masks, view.coseg_masks, out.latents, out.prototype,
                                  (cfg.beta_proto, cfg.beta_latent))
                nx.backward(nx.scale(loss, 1.0 / view.coseg_masks.size))
                nx.sgd_step(params.tensors, opt)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"iteration {it}: {exc}") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"iteration {it}: loss is {value}")
            losses.append((it, value))
            if log:
                log.write(f"{it}\t{value!r}\n")
            it += 1
            if out_dir and cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
                save_checkpoint(_snapshot(it, params, opt, sampler_state, noise),
                                out_dir / f"checkpoint_{it:07d}.bin")
    finally:
        if log:
            log.close()
        if hasattr(source, "close"):
            source.close()
    final = _snapshot(it, params, opt, sampler_state, noise)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(final, out_dir / "checkpoint_final.bin")
    return TrainResult(final, losses)


def _snapshot(it, params, opt, sampler_state, noise) -> Checkpoint:
    sampler = np.random.default_rng()
    sampler.bit_generator.state = sampler_state
    return Checkpoint(it, params.copy(), {k: v.copy() for k, v in opt.velocity.items()},
                      _pack_rng(sampler, noise))


def train(dataset: Dataset, cfg: TrainConfig, classes: Optional[Sequence[str]] = None,
          resume: Optional[Checkpoint] = None, log_path=None) -> TrainResult:
    """Train on episodes drawn from ``classes`` (default: every class in ``dataset``).

    ``resume`` continues a saved run up to ``cfg.iterations`` total
    iterations; otherwise parameters are initialised from ``cfg.seed``.
    """
    classes = dataset.classes if classes is None else list(classes)
    start = resume if resume is not None else initial_checkpoint(cfg)
    if resume is not None:
        start = Checkpoint(resume.iteration, resume.params.copy(), resume.velocities,
                           resume.rng_state, resume.version)
    if cfg.output_dir:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    return _run(dataset, classes, cfg, start, Path(log_path) if log_path else None)


def fine_tune(ckpt: Checkpoint, dataset: Dataset, cfg: TrainConfig,
              classes: Optional[Sequence[str]] = None, log_path=None) -> TrainResult:
    """The training loop again, starting from ``ckpt``'s parameters.

    Iterations count from zero, the optimiser velocity starts at rest and
    the random streams are re-derived from ``cfg.seed``.  The attention
    flags of ``cfg`` are ignored: the architecture is the checkpoint's.
    """
    classes = dataset.classes if classes is None else list(classes)
    start = Checkpoint(0, ckpt.params.copy(), {}, _pack_rng(*_streams(cfg.seed)))
    if cfg.output_dir:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    return _run(dataset, classes, cfg, start, Path(log_path) if log_path else None)


def train_fixed_episode(view: EpisodeView, cfg: TrainConfig, log_path=None) -> TrainResult:
    """The training loop on one episode repeated every iteration, without augmentation.

    A sanity check of the optimiser and the model's capacity: the loss on a
    single memorised episode should collapse.
    """
    if cfg.output_dir:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    return _run(None, (), cfg, initial_checkpoint(cfg), Path(log_path) if log_path else None, view)


def write_loss_log(losses: Sequence[Tuple[int, float]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it, value in losses:
            fh.write(f"{it}\t{value!r}\n")
