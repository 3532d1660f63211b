import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvice import synthdata as S
from dvice.episodes import load_dataset


def test_circle_area_tracks_pi_r_squared():
    _, mask = S.render_shape("circle", (31.5, 31.5), 10, "solid", 64, np.random.default_rng(0))
    assert abs(int(mask.sum()) - math.pi * 100) <= 20


@pytest.mark.parametrize("side", [4, 7, 10, 20])
def test_square_area_is_exact(side):
    half = side / 2
    # a pixel-corner centre makes the raster axis-aligned and exact
    centre = (31.5 + (0.5 if side % 2 else 0), 31.5 + (0.5 if side % 2 else 0))
    _, mask = S.render_shape("square", centre, half, "solid", 64, np.random.default_rng(0))
    assert int(mask.sum()) == side * side


def test_degenerate_scale_rejected():
    with pytest.raises(ValueError):
        S.render_shape("circle", (10, 10), 0, "solid", 32, np.random.default_rng(0))
    with pytest.raises(ValueError):
        S.render_shape("blob", (10, 10), 4, "solid", 32, np.random.default_rng(0))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(S.SHAPES), st.sampled_from(S.TEXTURES), st.floats(3, 12), st.integers(0, 1000))
def test_texture_stays_inside_support(kind, texture, scale, seed):
    patch, mask = S.render_shape(kind, (20.0, 20.0), scale, texture, 40, np.random.default_rng(seed))
    assert mask.any()
    assert not patch[:, mask == 0].any()


def test_class_count():
    cfg = S.CorpusConfig()
    assert len(cfg.classes) == 12
    assert len(S.CorpusConfig(textures=S.TEXTURES).classes) == 18
    with pytest.raises(ValueError):
        S.CorpusConfig(shapes=("circle",), textures=("solid", "stripes"))


def test_classes_differ_in_shape_or_texture():
    parts = [S.class_parts(c) for c in S.CorpusConfig(textures=S.TEXTURES).classes]
    assert len(set(parts)) == len(parts)


def test_mask_is_exact_dominant_support():
    cfg = S.CorpusConfig(samples_per_class=6, seed=3)
    for s in S.render_corpus(cfg, ["ring-stripes", "triangle-solid"]):
        assert s.mask.any() and set(np.unique(s.mask)) <= {0, 1}
        assert s.image.dtype == np.float32 and 0 <= s.image.min() and s.image.max() <= 1


def test_clutter_never_enters_mask(monkeypatch):
    painted = []
    original = S._paint

    def recording(*args, **kwargs):
        painted.append(original(*args, **kwargs))
        return painted[-1]

    monkeypatch.setattr(S, "_paint", recording)
    cfg = S.CorpusConfig(samples_per_class=1, clutter_count=(3, 3), seed=1)
    for index in range(4):
        painted.clear()
        sample = S.render_class(cfg, index)[0]
        *clutter, dominant = painted
        assert len(clutter) == 3
        assert np.array_equal(sample.mask.astype(bool), dominant)
        for c in clutter:
            assert not sample.mask[c & ~dominant].any()


def test_dual_object_masks_are_disjoint():
    cfg = S.CorpusConfig(dual_object=True)
    rng = np.random.default_rng(0)
    _, a, b = S.render_dual("circle-solid", "cross-stripes", cfg, rng)
    assert a.any() and b.any() and not (a & b).any()


def test_dual_corpus_needs_a_partner():
    with pytest.raises(ValueError):
        S.render_corpus(S.CorpusConfig(dual_object=True, samples_per_class=1), ["circle-solid"])


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generate_is_byte_reproducible(tmp_path):
    cfg = S.CorpusConfig(samples_per_class=3, seed=7)
    S.generate_corpus(cfg, tmp_path / "a")
    S.generate_corpus(cfg, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_generated_corpus_loads(tmp_path):
    cfg = S.CorpusConfig(samples_per_class=3, seed=2)
    rows = S.generate_corpus(cfg, tmp_path)
    assert len({r[0] for r in rows}) == 12
    ds = load_dataset(tmp_path)
    assert len(ds) == 36 and ds.classes == sorted(cfg.classes)
    for sample, original in zip(ds.samples, S.render_corpus(cfg)):
        assert sample.mask.any()
        assert np.array_equal(sample.mask, original.mask)
        assert np.abs(sample.image - original.image).max() <= 0.5 / 255 + 1e-6


def test_class_subset(tmp_path):
    rows = S.generate_corpus(S.CorpusConfig(samples_per_class=2), tmp_path, ["diamond-solid"])
    assert {r[0] for r in rows} == {"diamond-solid"} and len(rows) == 2
    with pytest.raises(ValueError):
        S.generate_corpus(S.CorpusConfig(samples_per_class=2), tmp_path, ["nope"])
