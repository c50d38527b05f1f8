import json
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from haystack import lesion
from haystack.data import load_mask, read_manifest, save_mask, save_png
from haystack.lesion import (
    AnnotatedSlide,
    CropSpec,
    SplitConfigError,
    build_crop_dataset,
    find_regions,
    sample_negative_crops,
    sample_positive_crops,
)


def flood_fill_components(mask):
    """Reference 8-connected labelling by BFS."""
    mask = np.asarray(mask) > 0
    seen = np.zeros_like(mask)
    comps = []
    for r0, c0 in zip(*np.nonzero(mask)):
        if seen[r0, c0]:
            continue
        comp, queue = [], deque([(r0, c0)])
        seen[r0, c0] = True
        while queue:
            r, c = queue.popleft()
            comp.append((r, c))
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < mask.shape[0] and 0 <= cc < mask.shape[1] and mask[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        queue.append((rr, cc))
        comps.append(frozenset(comp))
    return set(comps)


def test_two_blobs():
    mask = np.zeros((20, 20), np.uint8)
    mask[2:5, 2:5] = 1
    mask[10:13, 14:17] = 1
    regions = find_regions(mask)
    assert [r.size for r in regions] == [9, 9]
    assert [r.bbox for r in regions] == [(2, 2, 3, 3), (14, 10, 3, 3)]


def test_diagonal_pixels_join():
    mask = np.zeros((4, 4), np.uint8)
    mask[0, 0] = mask[1, 1] = mask[2, 2] = 1
    assert len(find_regions(mask)) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 0.6))
def test_regions_match_flood_fill(seed, density):
    mask = (np.random.default_rng(seed).random((24, 31)) < density).astype(np.uint8)
    got = {frozenset(map(tuple, r.pixels.tolist())) for r in find_regions(mask)}
    assert got == flood_fill_components(mask)


def test_bin_edges():
    spec = CropSpec(128, (0.01, 0.1))
    assert not spec.in_bin(0.01) and spec.in_bin(0.1) and spec.in_bin(0.05)


def test_bad_bin_rejected():
    with pytest.raises(ValueError):
        CropSpec(128, (0.1, 0.01))


def lesion_slide(size=400, center=0, slide_id="s0", green=0.3, blob=(100, 100, 41, 4)):
    image = np.full((size, size, 3), green, np.float32)
    mask = np.zeros((size, size), np.uint8)
    x, y, w, h = blob
    mask[y:y + h, x:x + w] = 1
    return AnnotatedSlide(image, mask, center, slide_id)


def test_164_pixel_region_in_128_crop():
    slide = lesion_slide()  # 41 x 4 = 164 lesion pixels
    assert 164 / 128 ** 2 == 0.010009765625
    region = find_regions(slide.mask)[0]
    crops = sample_positive_crops(slide, region, CropSpec(128, (0.01, 0.1), crops_per_region=5), seed=1)
    assert len(crops) == 5
    for c in crops:
        assert c.lesion_pixels == 164 and c.o2i == 0.010009765625
        x, y = c.offset
        assert x <= 100 and x + 128 >= 141 and y <= 100 and y + 128 >= 104
        assert c.image.shape == (128, 128, 3)
    assert sample_positive_crops(slide, region, CropSpec(128, (0.001, 0.01), crops_per_region=5,
                                                         max_attempts_per_crop=20), seed=1) == []


def test_region_larger_than_crop_yields_nothing():
    slide = lesion_slide(blob=(10, 10, 140, 3))
    report = lesion.CropReport()
    assert sample_positive_crops(slide, find_regions(slide.mask)[0], CropSpec(128, (0.0, 1.0)), 0, report) == []
    assert report.notes


def test_positive_mask_recount():
    rng = np.random.default_rng(3)
    mask = np.zeros((300, 300), np.uint8)
    mask[50:60, 50:70] = 1
    mask[55:58, 75:90] = 1  # a second component inside some crops
    slide = AnnotatedSlide(rng.random((300, 300, 3)).astype(np.float32), mask, 0, "x")
    for region in find_regions(mask):
        for c in sample_positive_crops(slide, region, CropSpec(64, (0.0, 1.0), crops_per_region=10), 5):
            assert c.mask.sum() == c.lesion_pixels
            assert c.o2i == c.mask.sum() / 64 ** 2


def test_green_filter_exhaustive():
    # 6x6 slide, 2px crops: every offset is reachable; left half bright green, right half dark
    image = np.zeros((6, 6, 3), np.float32)
    image[:, :3, 1] = 1.0
    image[:, 3:, 1] = 0.1
    slide = AnnotatedSlide(image, np.zeros((6, 6), np.uint8), 0, "h")
    spec = CropSpec(2, (0.0, 1.0), max_attempts_per_crop=200)
    crops = sample_negative_crops(slide, spec, 100, seed=0)
    assert len(crops) == 100
    passing = set()
    for y in range(5):
        for x in range(5):
            if image[y:y + 2, x:x + 2, 1].mean() * 255 < 200:
                passing.add((x, y))
    assert {c.offset for c in crops} <= passing
    assert {c.offset for c in crops} == passing  # 100 draws over 10 offsets cover them all


def test_negative_filter_threshold_boundary():
    at = np.full((4, 4, 3), 200 / 255, np.float32)
    below = np.full((4, 4, 3), 199 / 255, np.float32)
    spec = CropSpec(4, (0.0, 1.0), max_attempts_per_crop=3)
    assert sample_negative_crops(AnnotatedSlide(at, np.zeros((4, 4)), 0, "a"), spec, 1, 0) == []
    assert len(sample_negative_crops(AnnotatedSlide(below, np.zeros((4, 4)), 0, "b"), spec, 1, 0)) == 1


def corpus():
    slides = []
    for center in range(3):
        slides.append(lesion_slide(300, center, f"t{center}", blob=(60 + 10 * center, 80, 30, 20)))
        slides.append(AnnotatedSlide(np.full((300, 300, 3), 0.4, np.float32), np.zeros((300, 300)), center,
                                     f"h{center}"))
    return slides


SPLIT_MAP = {0: "train", 1: "val", 2: "test"}


def test_center_disjoint_and_balanced(tmp_path):
    spec = CropSpec(64, (0.1, 0.5), crops_per_region=6)
    manifest, report = build_crop_dataset(corpus(), spec, SPLIT_MAP, seed=1, out_dir=tmp_path)
    for split, center in (("train", 0), ("val", 1), ("test", 2)):
        recs = manifest.records(split)
        assert {r.center_id for r in recs} == {center}
        labels = [r.label for r in recs]
        assert labels.count(1) == labels.count(0) == 6
        for r in recs:
            if r.label:
                assert spec.in_bin(r.o2i)
                assert load_mask(tmp_path / r.mask_path).sum() == r.lesion_pixels
            else:
                assert r.o2i == 0.5 and r.lesion_pixels == 0 and r.slide_id.startswith("h")


def test_unmapped_center_rejected():
    with pytest.raises(SplitConfigError):
        build_crop_dataset(corpus(), CropSpec(64), {0: "train", 1: "val"}, seed=0)


def test_checksum_deterministic(tmp_path):
    spec = CropSpec(64, (0.1, 0.5), crops_per_region=4)
    a, _ = build_crop_dataset(corpus(), spec, SPLIT_MAP, seed=7, out_dir=tmp_path / "a")
    b, _ = build_crop_dataset(corpus(), spec, SPLIT_MAP, seed=7, out_dir=tmp_path / "b")
    c, _ = build_crop_dataset(corpus(), spec, SPLIT_MAP, seed=8)
    assert a.checksum == b.checksum
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    assert c.checksum != a.checksum


def test_split_map_forms():
    assert lesion.parse_split_map({"train": [0, 1], "test": [2]}) == {0: "train", 1: "train", 2: "test"}
    assert lesion.parse_split_map({"4": "val"}) == {4: "val"}
    with pytest.raises(SplitConfigError):
        lesion.parse_split_map({"4": "holdout"})


def test_sidecar_ingestion(tmp_path):
    slide = lesion_slide(200)
    save_png(tmp_path / "a.png", slide.image)
    save_mask(tmp_path / "a-mask.png", slide.mask)
    save_png(tmp_path / "b.png", np.full((200, 200, 3), 0.2))
    (tmp_path / "slides.json").write_text(json.dumps([
        {"image": "a.png", "mask": "a-mask.png", "center_id": 3},
        {"image": "b.png", "center_id": 3}]))
    slides = lesion.load_slides(tmp_path / "slides.json")
    assert [s.slide_id for s in slides] == ["a", "b"]
    assert not slides[0].healthy and slides[1].healthy
    manifest, _ = build_crop_dataset(slides, CropSpec(128, (0.01, 0.1), crops_per_region=2), {3: "train"}, 0,
                                     tmp_path / "out")
    assert read_manifest(tmp_path / "out") == manifest
    assert len(manifest.records("train")) == 4
