"""Mask scoring, episode-level evaluation and latent-embedding export.

Precision is overall pixel accuracy over foreground and background, the
usual convention in the co-segmentation literature.  Jaccard is the
foreground intersection-over-union, with two empty masks scoring 1.0 (a
blank prediction for an absent object is correct).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from . import numerics as nx
from .episodes import Dataset, EpisodeConfig, sample_episode
from .model import ModelParams, binarize, encode, segment_episode


def _pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, m in (("predicted", pred), ("ground-truth", gt)):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    return pred.astype(bool), gt.astype(bool)


def precision(pred, gt) -> float:
    """Percentage of pixels labelled correctly, foreground and background alike."""
    pred, gt = _pair(pred, gt)
    if pred.size == 0:
        raise ValueError("empty masks")
    return 100.0 * float(np.count_nonzero(pred == gt)) / pred.size


def jaccard(pred, gt) -> float:
    """Foreground intersection over union; 1.0 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(pred & gt)) / union


@dataclass
class EvalReport:
    precisions: List[float] = field(default_factory=list)  # per episode, percent
    jaccards: List[float] = field(default_factory=list)  # per episode, fraction

    @property
    def episodes(self) -> int:
        return len(self.precisions)

    @property
    def mean_precision(self) -> float:
        return float(np.mean(self.precisions))

    @property
    def mean_jaccard(self) -> float:
        return float(np.mean(self.jaccards))


# A segmenter maps (guide images, co-seg images) to probability masks.
Segmenter = Callable[[np.ndarray, np.ndarray], Sequence[np.ndarray]]


def score_episode(probs: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                  tau_b: float = 0.5, tau_nf: float = 0.1):
    """Mean precision and Jaccard over one episode's co-seg images.

    Blank (no-foreground) outputs are scored as all-background masks.
    """
    ps, js = [], []
    for prob, gt in zip(probs, gts, strict=True):
        b = binarize(prob, tau_b, tau_nf)
        ps.append(precision(b.mask, gt))
        js.append(jaccard(b.mask, gt))
    return float(np.mean(ps)), float(np.mean(js))


def evaluate(model: Union[ModelParams, Segmenter], dataset: Dataset, classes: Optional[Sequence[str]],
             cfg: EpisodeConfig, num_episodes: int, rng: np.random.Generator,
             tau_b: float = 0.5, tau_nf: float = 0.1) -> EvalReport:
    """Sample ``num_episodes`` episodes and score eval-mode segmentations.

    ``model`` is either trained parameters or any callable with the
    ``segment_episode`` signature (used for oracle and baseline stubs).
    Episodes are drawn and scored one after another, so the report depends
    only on the rng state.
    """
    if num_episodes < 1:
        raise ValueError("evaluate needs at least one episode")
    if isinstance(model, ModelParams):
        params = model

        def model(guide, coseg):
            return segment_episode(guide, coseg, params, "eval")

    classes = dataset.classes if classes is None else classes
    report = EvalReport()
    for _ in range(num_episodes):
        view = sample_episode(dataset, classes, cfg, rng).view()
        probs = model(view.guide_images, view.coseg_images)
        p, j = score_episode(probs, view.coseg_masks, tau_b, tau_nf)
        report.precisions.append(p)
        report.jaccards.append(j)
    return report


def embeddings(params: ModelParams, dataset: Dataset, batch: int = 32) -> np.ndarray:
    """Spatially averaged posterior mean per sample (N x C_z)."""
    rows = []
    with nx.no_grad():
        for start in range(0, len(dataset), batch):
            images = np.stack([s.image for s in dataset.samples[start:start + batch]])
            latents, _ = encode(images, params)
            rows.append(latents.mean.data.mean(axis=(2, 3)))
    if not rows:
        return np.zeros((0, params.config.latent_channels))
    return np.concatenate(rows)


def export_embeddings(params: ModelParams, dataset: Dataset, out) -> np.ndarray:
    """Write ``class_id,e0,...`` rows (one per sample) to ``out`` and return the vectors."""
    vectors = embeddings(params, dataset)
    header = ["class_id"] + [f"e{i}" for i in range(params.config.latent_channels)]
    with open(Path(out), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for sample, vec in zip(dataset.samples, vectors):
            writer.writerow([sample.class_id] + [repr(float(v)) for v in vec])
    return vectors
