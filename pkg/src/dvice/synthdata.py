"""Synthetic shape-on-clutter corpus with exact ground-truth masks.

A class is a (shape kind, texture kind) pair.  Each image holds one
full-scale dominant object of its class over a noisy background and a few
reduced-scale clutter objects of other shape kinds; the mask is exactly
the dominant object's raster support.
"""

from __future__ import annotations

import colorsys
import itertools
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond")
TEXTURES = ("solid", "stripes", "checker")

MANIFEST = "manifest.tsv"


@dataclass(frozen=True)
class CorpusConfig:
    shapes: Tuple[str, ...] = SHAPES
    textures: Tuple[str, ...] = ("solid", "stripes")
    samples_per_class: int = 40
    image_size: int = 64
    clutter_count: Tuple[int, int] = (1, 3)
    noise_amplitude: float = 0.25
    scale_range: Tuple[float, float] = (16.0, 21.0)
    clutter_scale: Tuple[float, float] = (0.3, 0.45)
    dual_object: bool = False
    class_colors: bool = False
    color_jitter: float = 0.04
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "textures", tuple(self.textures))
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape kind {s!r}")
        for t in self.textures:
            if t not in TEXTURES:
                raise ValueError(f"unknown texture kind {t!r}")
        if len(self.classes) < 4:
            raise ValueError("need at least 4 classes (shapes x textures)")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        lo, hi = self.clutter_count
        if not 0 <= lo <= hi:
            raise ValueError("bad clutter_count range")

    @property
    def classes(self) -> List[str]:
        return [f"{s}-{t}" for s, t in itertools.product(self.shapes, self.textures)]


@dataclass
class RenderedSample:
    image: np.ndarray  # 3 x S x S float32 in [0, 1]
    mask: np.ndarray  # S x S uint8 in {0, 1}
    class_id: str


def class_parts(class_id: str) -> Tuple[str, str]:
    shape, texture = class_id.split("-")
    return shape, texture


def shape_support(kind: str, center: Tuple[float, float], scale: float, size: int) -> np.ndarray:
    """Boolean raster support of a shape on a ``size`` x ``size`` grid.

    ``center`` is (row, col) in pixel-centre coordinates; ``scale`` is the
    half-extent.  A square of scale s covers exactly (2s)^2 pixels when 2s
    is an integer and the centre sits on a pixel corner.
    """
    if not scale > 0:
        raise ValueError(f"degenerate shape scale {scale}")
    cy, cx = center
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        sup = dy * dy + dx * dx <= scale * scale
    elif kind == "square":
        sup = (np.abs(dy) < scale) & (np.abs(dx) < scale)
    elif kind == "diamond":
        sup = np.abs(dy) + np.abs(dx) <= scale
    elif kind == "triangle":
        # apex up, base 2s at the bottom, height 2s
        t = (dy + scale) / (2 * scale)
        sup = (t >= 0) & (t <= 1) & (np.abs(dx) <= t * scale)
    elif kind == "cross":
        arm = scale / 3
        sup = ((np.abs(dy) <= arm) & (np.abs(dx) <= scale)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= scale))
    elif kind == "ring":
        r2 = dy * dy + dx * dx
        sup = (r2 <= scale * scale) & (r2 >= (0.55 * scale) ** 2)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return sup


def texture_fill(texture: str, color: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """A 3 x size x size texture built from ``color`` and a contrasting second colour."""
    alt = np.clip(1.0 - color + rng.uniform(-0.1, 0.1, 3), 0.0, 1.0)
    yy, xx = np.mgrid[0:size, 0:size]
    period = 4
    if texture == "solid":
        pattern = np.zeros((size, size), bool)
    elif texture == "stripes":
        pattern = ((yy + xx) // period) % 2 == 1
    elif texture == "checker":
        pattern = ((yy // period) + (xx // period)) % 2 == 1
    else:
        raise ValueError(f"unknown texture kind {texture!r}")
    return np.where(pattern[None], alt[:, None, None], color[:, None, None])


def render_shape(kind: str, center, scale: float, texture: str, size: int = 64,
                 rng: Optional[np.random.Generator] = None, color=None) -> Tuple[np.ndarray, np.ndarray]:
    """Return (patch, mask): the textured fill restricted to the support, and the support."""
    rng = rng if rng is not None else np.random.default_rng(0)
    mask = shape_support(kind, center, scale, size)
    if not mask.any():
        raise ValueError("shape support is empty (degenerate scale or off-frame centre)")
    color = rng.uniform(0.0, 1.0, 3) if color is None else np.asarray(color, float)
    patch = texture_fill(texture, color, size, rng) * mask[None]
    return patch.astype(np.float32), mask.astype(np.uint8)


def class_color(cfg: CorpusConfig, class_id: str, rng: np.random.Generator) -> Optional[np.ndarray]:
    """Characteristic hue of a class (golden-ratio spacing), jittered per sample.

    Returns None when class colours are disabled (fully random colour).
    """
    if not cfg.class_colors:
        return None
    idx = cfg.classes.index(class_id)
    hue = (idx * 0.618033988749895 + rng.uniform(-cfg.color_jitter, cfg.color_jitter)) % 1.0
    sat = rng.uniform(0.65, 0.95)
    val = rng.uniform(0.7, 1.0)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


def _paint(image: np.ndarray, kind: str, center, scale: float, texture: str,
           rng: np.random.Generator, color=None) -> np.ndarray:
    size = image.shape[-1]
    patch, mask = render_shape(kind, center, scale, texture, size, rng, color)
    m = mask.astype(bool)
    image[:, m] = patch[:, m]
    return m


def _background(cfg: CorpusConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.image_size
    base = rng.uniform(0.0, 1.0 - cfg.noise_amplitude, 3)
    return base[:, None, None] + rng.uniform(0.0, cfg.noise_amplitude, (3, s, s))


def _add_clutter(image, cfg: CorpusConfig, exclude_shapes: Sequence[str], ref_scale: float, rng):
    s = cfg.image_size
    kinds = [k for k in cfg.shapes if k not in exclude_shapes] or list(cfg.shapes)
    lo, hi = cfg.clutter_count
    for _ in range(int(rng.integers(lo, hi + 1))):
        kind = kinds[int(rng.integers(len(kinds)))]
        texture = cfg.textures[int(rng.integers(len(cfg.textures)))]
        sc = ref_scale * rng.uniform(*cfg.clutter_scale)
        center = rng.uniform(sc, s - 1 - sc, 2)
        _paint(image, kind, center, sc, texture, rng)


def render_sample(class_id: str, cfg: CorpusConfig, rng: np.random.Generator) -> RenderedSample:
    """One single-object sample: background, clutter, then the dominant object last."""
    kind, texture = class_parts(class_id)
    s = cfg.image_size
    image = _background(cfg, rng)
    scale = rng.uniform(*cfg.scale_range)
    _add_clutter(image, cfg, (kind,), scale, rng)
    center = rng.uniform(scale, s - 1 - scale, 2)
    mask = _paint(image, kind, center, scale, texture, rng, class_color(cfg, class_id, rng))
    return RenderedSample(np.clip(image, 0, 1).astype(np.float32), mask.astype(np.uint8), class_id)


def render_dual(class_a: str, class_b: str, cfg: CorpusConfig, rng: np.random.Generator):
    """Two full-scale objects of different classes in opposite halves of the frame.

    Returns (image, mask_a, mask_b); the halves are assigned at random and the
    objects never overlap.
    """
    if class_a == class_b:
        raise ValueError("dual-object sample needs two distinct classes")
    s = cfg.image_size
    image = _background(cfg, rng)
    half = s / 2
    hi = min(cfg.scale_range[1], half / 2 - 1)
    lo = min(cfg.scale_range[0] * 0.75, hi)
    scales = rng.uniform(lo, hi, 2)
    kinds = [class_parts(class_a)[0], class_parts(class_b)[0]]
    _add_clutter(image, cfg, kinds, float(scales.mean()), rng)
    a_left = bool(rng.integers(2))
    masks = []
    for j, (cid, sc) in enumerate(zip((class_a, class_b), scales)):
        kind, texture = class_parts(cid)
        left = a_left if j == 0 else not a_left
        col_lo = sc if left else half + sc
        col_hi = half - 1 - sc if left else s - 1 - sc
        center = (rng.uniform(sc, s - 1 - sc), rng.uniform(col_lo, max(col_lo, col_hi)))
        masks.append(_paint(image, kind, center, sc, texture, rng, class_color(cfg, cid, rng)))
    return np.clip(image, 0, 1).astype(np.float32), masks[0].astype(np.uint8), masks[1].astype(np.uint8)


def _class_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def render_class(cfg: CorpusConfig, class_index: int,
                 partner_classes: Optional[Sequence[str]] = None) -> List[RenderedSample]:
    """All samples of one class, from a per-class derived seed (order independent).

    In the dual-object variant the second object's class is drawn from
    ``partner_classes`` (default: every other class).
    """
    classes = cfg.classes
    cid = classes[class_index]
    rng = np.random.default_rng(_class_seed(cfg.seed, class_index))
    out = []
    pool = list(partner_classes) if partner_classes is not None else classes
    for _ in range(cfg.samples_per_class):
        if cfg.dual_object:
            other = [c for c in pool if c != cid]
            if not other:
                raise ValueError(f"dual-object class {cid} has no partner class")
            partner = other[int(rng.integers(len(other)))]
            image, mask, _ = render_dual(cid, partner, cfg, rng)
            out.append(RenderedSample(image, mask, cid))
        else:
            out.append(render_sample(cid, cfg, rng))
    return out


def render_corpus(cfg: CorpusConfig, classes: Optional[Sequence[str]] = None) -> List[RenderedSample]:
    """Render every class (or only ``classes``, which then also bound dual-object partners)."""
    samples = []
    for i, cid in enumerate(cfg.classes):
        if classes is None or cid in classes:
            samples.extend(render_class(cfg, i, classes))
    return samples


def save_image(path, image: np.ndarray) -> None:
    """Write a 3 x S x S float image as 8-bit binary PPM."""
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path, format="PPM")


def save_mask(path, mask: np.ndarray) -> None:
    """Write a binary mask as 8-bit PGM, 255 = foreground."""
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, "L").save(path, format="PPM")


def generate_corpus(cfg: CorpusConfig, out_dir,
                    classes: Optional[Sequence[str]] = None) -> List[Tuple[str, str, str]]:
    """Write images, masks and ``manifest.tsv`` under ``out_dir``.

    ``classes`` restricts output as in :func:`render_corpus`.  Returns the
    manifest rows (class_id, image path, mask path), paths relative to
    ``out_dir``.
    """
    if classes is not None:
        unknown = sorted(set(classes) - set(cfg.classes))
        if unknown:
            raise ValueError(f"unknown classes {unknown}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for ci, cid in enumerate(cfg.classes):
        if classes is not None and cid not in classes:
            continue
        for j, sample in enumerate(render_class(cfg, ci, classes)):
            stem = f"{cid}_{j:04d}"
            img_rel = os.path.join("images", stem + ".ppm")
            mask_rel = os.path.join("masks", stem + ".pgm")
            save_image(out / img_rel, sample.image)
            save_mask(out / mask_rel, sample.mask)
            rows.append((cid, img_rel, mask_rel))
    with open(out / MANIFEST, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write("\t".join(row) + "\n")
    return rows
