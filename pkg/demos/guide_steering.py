"""Swap the guide majority on two-object images and watch which object gets segmented.

Takes a checkpoint (``dvice train`` output).  For each pair of classes the
same four co-seg images are segmented twice, once guided mostly by class A
and once mostly by class B, and the foreground pixels landing on each object
are counted.  A steerable model moves its mask from A to B.
"""

import sys

import numpy as np

from dvice import model, synthdata, trainer
from dvice.episodes import Dataset


def main(ckpt_path, pairs=5, seed=0):
    params = trainer.load_checkpoint(ckpt_path).params
    cfg = synthdata.CorpusConfig(seed=seed)
    singles = Dataset.from_rendered(synthdata.render_corpus(cfg))
    dual_cfg = synthdata.CorpusConfig(seed=seed, dual_object=True)
    rng = np.random.default_rng(seed)
    for _ in range(pairs):
        a, b = rng.choice(singles.classes, 2, replace=False)
        shots = [synthdata.render_dual(a, b, dual_cfg, rng) for _ in range(4)]
        images = np.stack([s[0] for s in shots])
        on_a, on_b = np.stack([s[1] for s in shots]), np.stack([s[2] for s in shots])
        line = [f"{a} vs {b}:"]
        for major, minor in ((a, b), (b, a)):
            ids = list(rng.choice(singles.by_class[major], 6, replace=False))
            ids += list(rng.choice(singles.by_class[minor], 2, replace=False))
            guide = np.stack([singles[i].image for i in ids])
            masks = np.stack([model.binarize(p).mask for p in model.segment_episode(guide, images, params)])
            line.append(f"guide {major}: {int((masks & on_a).sum())} px on {a}, {int((masks & on_b).sum())} px on {b};")
        print(" ".join(line))


if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit("usage: python3 demos/guide_steering.py CHECKPOINT")
    main(sys.argv[1])
