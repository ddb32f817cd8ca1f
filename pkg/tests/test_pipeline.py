import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lymphoseg import pipeline
from lymphoseg.labels import CLASS_NAMES
from lymphoseg.pipeline import PatchPair, extract_patches, split_dataset, split_sizes


def _fake_patches(n, slides=6):
    return [(f"p{i}", i % slides) for i in range(n)]


# -------------------------------------------------------------------- patches

def test_patch_count_examples():
    img = np.zeros((512, 512), np.uint16)
    lbl = np.zeros((512, 512), np.uint8)
    assert len(extract_patches(img, lbl, 256, 0.5)) == 9
    assert len(extract_patches(img, lbl, 256, 0.0)) == 4
    assert len(extract_patches(img[:256, :256], lbl[:256, :256], 256, 0.5)) == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(8, 90), st.integers(8, 90), st.integers(4, 32), st.sampled_from([0.0, 0.25, 0.5, 0.75]))
def test_patch_count_formula(w, h, size, overlap):
    if size > min(w, h):
        with pytest.raises(ValueError):
            pipeline.patch_origins(w, h, size, overlap)
        return
    stride = size * (1 - overlap)
    expected = (int((w - size) // stride) + 1) * (int((h - size) // stride) + 1)
    if stride != int(stride):
        return  # the formula needs an integer stride
    origins = pipeline.patch_origins(w, h, size, overlap)
    assert len(origins) == expected == pipeline.expected_patch_count(w, h, size, overlap)
    assert len(set(origins)) == len(origins)
    assert origins == sorted(origins, key=lambda o: (o[1], o[0]))


def test_patches_align_with_source():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 60000, (96, 128)).astype(np.uint16)
    lbl = rng.integers(0, 5, (96, 128)).astype(np.uint8)
    for p in extract_patches(img, lbl, 32, 0.5, slide_id=3):
        x, y = p.origin
        np.testing.assert_array_equal(p.image[0], img[y:y + 32, x:x + 32])
        np.testing.assert_array_equal(p.target, lbl[y:y + 32, x:x + 32])
        assert p.image.shape == (1, 32, 32) and p.patch_id == f"3_{x}_{y}"


def test_half_overlap_covers_interior():
    img = np.zeros((160, 224))
    covered = np.zeros(img.shape, bool)
    for x, y in pipeline.patch_origins(224, 160, 64, 0.5):
        covered[y:y + 64, x:x + 64] = True
    assert covered.all()


def test_extract_rejects_oversize_and_mismatch():
    with pytest.raises(ValueError):
        extract_patches(np.zeros((16, 16)), np.zeros((16, 16)), 32)
    with pytest.raises(ValueError):
        extract_patches(np.zeros((16, 16)), np.zeros((16, 8)), 8)
    with pytest.raises(ValueError):
        pipeline.patch_stride(8, 1.0)


# ------------------------------------------------------------------ normalise

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1, 60000))
def test_normalize_zero_mean_unit_std(seed, scale):
    img = np.random.default_rng(seed).random((1, 16, 16)) * scale
    out = pipeline.normalize_patch(PatchPair(img.astype(np.float32), np.zeros((16, 16), np.uint8)))
    assert abs(float(out.image.astype(np.float64).mean())) < 1e-5
    assert abs(float(out.image.astype(np.float64).std()) - 1) < 1e-4


def test_normalize_constant_patch():
    p = PatchPair(np.full((1, 8, 8), 1234.0, np.float32), np.ones((8, 8), np.uint8), 2, (8, 0))
    out = pipeline.normalize_patch(p)
    assert not out.image.any()
    assert out.target is p.target and out.origin == (8, 0)


# ------------------------------------------------------------------- splits

def test_split_7413():
    assert split_sizes(7413, (0.8, 0.1, 0.1)) == [5930, 741, 742]
    assert split_dataset(_fake_patches(7413)).sizes() == (5930, 741, 742)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_split_disjoint_and_exhaustive(seed):
    items = _fake_patches(157)
    for mode in ("random", "holdout"):
        s = split_dataset(items, mode=mode, seed=seed)
        ids = s.train + s.val + s.test
        assert len(ids) == len(set(ids)) == len(items)
        assert set(ids) == {pid for pid, _ in items}


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5000), st.floats(0.05, 0.9), st.floats(0.0, 1.0))
def test_split_sizes_track_ratios(n, a, frac):
    b = (1 - a) * frac
    ratios = (a, b, 1 - a - b)
    sizes = split_sizes(n, ratios)
    assert sum(sizes) == n and min(sizes) >= 0
    for s, r in zip(sizes, ratios):
        assert abs(s - n * r) < 2


def test_split_deterministic():
    items = _fake_patches(300)
    assert split_dataset(items, seed=4) == split_dataset(items, seed=4)
    assert split_dataset(items, seed=4).train != split_dataset(items, seed=5).train


def test_holdout_slide_all_in_test():
    items = _fake_patches(120)
    s = split_dataset(items, mode="holdout", holdout_slide=2)
    slide_of = dict(items)
    assert {slide_of[p] for p in s.test} == {2}
    assert len(s.test) == sum(1 for _, sl in items if sl == 2)
    assert all(slide_of[p] != 2 for p in s.train + s.val)
    default = split_dataset(items, mode="holdout")
    assert {slide_of[p] for p in default.test} == {5}


def test_split_errors():
    with pytest.raises(ValueError):
        split_dataset([])
    with pytest.raises(ValueError):
        split_dataset(_fake_patches(10, slides=1), mode="holdout")
    with pytest.raises(ValueError):
        split_dataset(_fake_patches(10), ratios=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        split_dataset(_fake_patches(10), mode="bogus")


# ---------------------------------------------------------------- statistics

def test_class_stats_hand_example():
    a = np.full((4, 4), 4, np.uint8)
    a[0, 0] = 0
    a[3, 3] = 0  # two separate CD3 cells
    b = np.full((4, 4), 4, np.uint8)
    b[1:3, 1:3] = 3
    stats = pipeline.class_stats([a, b])
    assert stats["CD3"].count == 2 and stats["CD3"].presence == 1
    assert stats["CD20"].count == 1 and stats["CD20"].presence == 1
    assert stats["CD8_CD3LO"].count == 0
    assert stats["CD3"].coverage == pytest.approx(2 / 32)
    assert stats["CD20"].coverage == pytest.approx(4 / 32)
    assert sum(s.coverage for s in stats.values()) == pytest.approx(1.0)


def test_class_stats_shuffle_invariant():
    rng = np.random.default_rng(1)
    targets = [rng.integers(0, 5, (8, 8)).astype(np.uint8) for _ in range(10)]
    a = pipeline.class_stats(targets)
    b = pipeline.class_stats([targets[i] for i in rng.permutation(10)])
    assert a == b


def test_class_stats_table_layout():
    stats = {n: pipeline.ClassStat(0, 0, 0.0) for n in CLASS_NAMES}
    stats["CD8_CD3LO"] = pipeline.ClassStat(14536, 5259, 0.076)
    text = pipeline.format_class_stats(stats)
    lines = text.splitlines()
    assert [l.split("|")[0].strip() for l in lines] == ["", "Count", "Presence", "Coverage"]
    assert "14536" in lines[1] and "5259" in lines[2] and "7.6%" in lines[3]
