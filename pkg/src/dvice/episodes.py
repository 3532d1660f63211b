"""Class-agnostic episodic sampling over a labelled image/mask dataset.

Class labels exist only so the sampler can assemble guide and co-seg sets;
:meth:`Episode.view` is the only thing handed to the model and it carries
no label field.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image

MANIFEST = "manifest.tsv"


class DatasetError(ValueError):
    """Malformed dataset directory or manifest."""


class EpisodeError(ValueError):
    """An episode cannot be drawn with the requested configuration."""


@dataclass
class Sample:
    image: np.ndarray  # 3 x S x S float32 in [0, 1]
    mask: np.ndarray  # S x S uint8 in {0, 1}
    class_id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} disagree")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be binary")


class Dataset:
    """Samples grouped by class; sample identity is the list index."""

    def __init__(self, samples: Sequence[Sample]):
        self.samples = list(samples)
        self.by_class: Dict[str, List[int]] = defaultdict(list)
        for i, s in enumerate(self.samples):
            self.by_class[s.class_id].append(i)
        self.by_class = dict(self.by_class)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def classes(self) -> List[str]:
        return sorted(self.by_class)

    def subset(self, classes: Sequence[str]) -> "Dataset":
        keep = set(classes)
        return Dataset([s for s in self.samples if s.class_id in keep])

    @classmethod
    def from_rendered(cls, rendered) -> "Dataset":
        return cls([Sample(r.image, r.mask, r.class_id) for r in rendered])


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def load_dataset(root) -> Dataset:
    """Read ``manifest.tsv`` (class_id, image path, mask path per line)."""
    root = Path(root)
    manifest = root / MANIFEST
    lines = manifest.read_text(encoding="utf-8").splitlines()
    samples = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"{manifest}:{lineno}: expected 3 tab-separated fields")
        cid, img, msk = parts
        samples.append(Sample(load_image(root / img), load_mask(root / msk), cid))
    if not samples:
        raise DatasetError(f"{manifest} lists no samples")
    return Dataset(samples)


class ClassSplit(NamedTuple):
    base_classes: List[str]
    target_classes: List[str]


def split_classes(all_classes: Sequence[str], target_fraction: float, seed: int) -> ClassSplit:
    """Disjoint base/target class sets; target size is round(fraction * count)."""
    classes = sorted(set(all_classes))
    if len(classes) < 2:
        raise ValueError("need at least two classes to split")
    n_target = int(round(target_fraction * len(classes)))
    if n_target < 1 or n_target > len(classes) - 1:
        raise ValueError(f"target fraction {target_fraction} leaves a side with no classes")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(classes))
    target = sorted(classes[i] for i in perm[:n_target])
    base = sorted(classes[i] for i in perm[n_target:])
    return ClassSplit(base, target)


def split_annotated(dataset: Dataset, fraction: float, seed: int):
    """Per-class partition into an annotated portion and a held-out portion."""
    rng = np.random.default_rng(seed)
    annotated, held = [], []
    for cid in dataset.classes:
        idx = dataset.by_class[cid]
        perm = rng.permutation(len(idx))
        cut = int(round(fraction * len(idx)))
        annotated += [dataset[idx[j]] for j in perm[:cut]]
        held += [dataset[idx[j]] for j in perm[cut:]]
    return Dataset(annotated), Dataset(held)


@dataclass(frozen=True)
class EpisodeConfig:
    k: int = 8  # guide size
    n: int = 6  # positives in the guide
    m: int = 4  # co-seg size
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 1 <= self.n <= self.k:
            raise ValueError(f"need 1 <= n <= k, got n={self.n}, k={self.k}")
        if self.m < 1:
            raise ValueError("m must be >= 1")


class EpisodeView(NamedTuple):
    """What the model sees: images and co-seg targets, no labels."""

    guide_images: np.ndarray  # k x 3 x S x S
    coseg_images: np.ndarray  # m x 3 x S x S
    coseg_masks: np.ndarray  # m x S x S


@dataclass
class Episode:
    guide: List[Sample]
    coseg: List[Sample]
    dominant_class: str
    guide_ids: List[int]
    coseg_ids: List[int]

    def view(self) -> EpisodeView:
        return EpisodeView(
            np.stack([s.image for s in self.guide]),
            np.stack([s.image for s in self.coseg]),
            np.stack([s.mask for s in self.coseg]),
        )

    def augmented(self, rng: np.random.Generator) -> "Episode":
        return Episode([augment(s, rng) for s in self.guide], [augment(s, rng) for s in self.coseg],
                       self.dominant_class, self.guide_ids, self.coseg_ids)


def eligible_classes(dataset: Dataset, classes: Sequence[str], cfg: EpisodeConfig) -> List[str]:
    return sorted(c for c in classes if len(dataset.by_class.get(c, ())) >= cfg.n + cfg.m)


def sample_episode(dataset: Dataset, classes: Sequence[str], cfg: EpisodeConfig,
                   rng: np.random.Generator) -> Episode:
    """Draw one episode from ``classes`` (one side of a split).

    The dominant class is uniform over classes holding at least n + m
    samples.  n positives and m co-seg images are drawn without replacement
    from it; the k - n outliers pick a uniformly random other class, then a
    random unused sample of that class.
    """
    classes = sorted(set(classes))
    eligible = eligible_classes(dataset, classes, cfg)
    if not eligible:
        raise EpisodeError(f"no class has the {cfg.n + cfg.m} samples an episode needs")
    dominant = eligible[int(rng.integers(len(eligible)))]
    pool = dataset.by_class[dominant]
    picks = rng.choice(len(pool), size=cfg.n + cfg.m, replace=False)
    positives = [pool[j] for j in picks[: cfg.n]]
    coseg = [pool[j] for j in picks[cfg.n:]]

    outliers: List[int] = []
    n_out = cfg.k - cfg.n
    if n_out:
        others = [c for c in classes if c != dominant and dataset.by_class.get(c)]
        if sum(len(dataset.by_class[c]) for c in others) < n_out:
            raise EpisodeError(f"non-dominant classes cannot supply {n_out} outliers")
        used = set()
        while len(outliers) < n_out:
            c = others[int(rng.integers(len(others)))]
            free = [i for i in dataset.by_class[c] if i not in used]
            if not free:
                continue
            i = free[int(rng.integers(len(free)))]
            used.add(i)
            outliers.append(i)

    guide_ids = positives + outliers
    order = rng.permutation(len(guide_ids))
    guide_ids = [guide_ids[j] for j in order]
    return Episode([dataset[i] for i in guide_ids], [dataset[i] for i in coseg],
                   dominant, guide_ids, coseg)


def augment(s: Sample, rng: np.random.Generator) -> Sample:
    """Random right-angle rotation and horizontal flip, applied to image and mask alike."""
    quarter = int(rng.integers(4))
    flip = bool(rng.integers(2))
    return transform(s, quarter, flip)


def transform(s: Sample, quarter_turns: int, flip: bool) -> Sample:
    """Counter-clockwise rotation by ``quarter_turns`` * 90 degrees, then optional left-right flip."""
    image = np.rot90(s.image, quarter_turns, axes=(1, 2))
    mask = np.rot90(s.mask, quarter_turns, axes=(0, 1))
    if flip:
        image = image[:, :, ::-1]
        mask = mask[:, ::-1]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask), s.class_id)
