import math

import numpy as np
import pytest
from PIL import Image

from haystack import nmnist
from haystack.data import load_png, read_manifest
from haystack.nmnist import (
    CanvasSpec,
    DatasetSpec,
    DigitPool,
    PoolExhaustedError,
    build_dataset,
    build_gaussian_control,
    compute_o2i,
    synthesize_sample,
)

from conftest import DATA


def test_o2i_smallest_canvas():
    assert compute_o2i(784, 4096) == 0.19140625


def test_o2i_largest_canvas():
    assert compute_o2i(784, 1048576) == pytest.approx(7.4768e-4, rel=1e-4)


def test_o2i_full():
    assert compute_o2i(500, 500) == 1.0


@pytest.mark.parametrize("obj, img", [(10, 5), (0, 5), (-1, 5), (3, 0)])
def test_o2i_domain(obj, img):
    with pytest.raises(ValueError):
        compute_o2i(obj, img)


def test_default_clutter_schedule():
    assert {s: CanvasSpec(s).clutter_count for s in (64, 128, 256, 512, 1024)} == nmnist.DEFAULT_CLUTTER
    for s in (64, 128, 256, 512, 1024):
        assert CanvasSpec(s).o2i == 784 / s ** 2


def test_clutter_density_roughly_constant():
    density = {s: (n + 1) / s ** 2 for s, n in nmnist.DEFAULT_CLUTTER.items()}
    ratio = density[64] / density[1024]
    assert 0.5 <= ratio <= 2.0


def test_positive_sample_has_three_digits(small_pool):
    canvas = CanvasSpec(64)
    seen = []
    # distinct flat digits make each instance countable by its intensity
    targets = np.full((1, 28, 28), 7, np.uint8)
    clutter = np.stack([np.full((28, 28), 10 + 20 * i, np.uint8) for i in range(9)])
    img, bbox = synthesize_sample(targets, clutter, canvas, 1, seed=3, target_index=0)
    assert img.shape == (64, 64, 1)
    x, y, w, h = bbox
    assert (w, h) == (28, 28) and 0 <= x <= 36 and 0 <= y <= 36
    rng = np.random.default_rng(3)
    clutter_idx = rng.integers(0, 9, size=2)
    corners = rng.integers(0, 37, size=(3, 2))
    assert tuple(corners[0]) == (x, y)
    expected = np.zeros((64, 64), np.uint8)
    for digit, (cx, cy) in zip([targets[0]] + [clutter[i] for i in clutter_idx], corners):
        expected[cy:cy + 28, cx:cx + 28] = np.maximum(expected[cy:cy + 28, cx:cx + 28], digit)
        seen.append(digit)
    np.testing.assert_array_equal(np.round(img[:, :, 0] * 255).astype(np.uint8), expected)
    assert len(seen) == 3


def test_negative_sample_has_three_clutter_digits():
    clutter = np.stack([np.full((28, 28), 10 + 20 * i, np.uint8) for i in range(9)])
    img, bbox = synthesize_sample(None, clutter, CanvasSpec(64), 0, seed=5)
    assert bbox is None
    rng = np.random.default_rng(5)
    idx = rng.integers(0, 9, size=3)
    corners = rng.integers(0, 37, size=(3, 2))
    expected = np.zeros((64, 64), np.uint8)
    for i, (cx, cy) in zip(idx, corners):
        expected[cy:cy + 28, cx:cx + 28] = np.maximum(expected[cy:cy + 28, cx:cx + 28], clutter[i])
    np.testing.assert_array_equal(np.round(img[:, :, 0] * 255).astype(np.uint8), expected)


def test_synthesis_deterministic(small_pool):
    a = synthesize_sample(small_pool.targets["train"], small_pool.clutter["train"], CanvasSpec(128), 1, 11, 4)
    b = synthesize_sample(small_pool.targets["train"], small_pool.clutter["train"], CanvasSpec(128), 1, 11, 4)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1] == b[1]


def test_target_pixels_inside_bbox():
    targets = np.full((1, 28, 28), 200, np.uint8)
    clutter = np.zeros((1, 28, 28), np.uint8)  # invisible clutter
    img, (x, y, w, h) = synthesize_sample(targets, clutter, CanvasSpec(128), 1, 99, 0)
    ys, xs = np.nonzero(img[:, :, 0])
    assert xs.min() == x and xs.max() == x + w - 1 and ys.min() == y and ys.max() == y + h - 1


def test_positive_needs_target_index(small_pool):
    with pytest.raises(ValueError):
        synthesize_sample(small_pool.targets["train"], small_pool.clutter["train"], CanvasSpec(64), 1, 0)


def test_fixture_pool_counts(small_pool, tmp_path):
    spec = DatasetSpec(CanvasSpec(64), train_size=20, val_size=0, test_size=0, balance=0.5, master_seed=1)
    m = build_dataset(small_pool, spec, tmp_path)
    labels = [r.label for r in read_manifest(tmp_path).records("train")]
    assert labels.count(1) == 10 and labels.count(0) == 10


def test_balance_rounding():
    assert nmnist.positive_count(100, 0.99) == 99
    assert nmnist.positive_count(100, 0.01) == 1
    assert nmnist.positive_count(11276, 0.5) == 5638
    assert nmnist.positive_count(3, 0.5) == 2


def test_targets_without_replacement(small_pool):
    spec = DatasetSpec(CanvasSpec(64), 20, 0, 0, 0.5, master_seed=2)
    m = build_dataset(small_pool, spec)
    # every target appears once: each positive's target pixels are a distinct pool digit
    positives = [r for r in m.records("train") if r.label]
    assert len(positives) == 10
    order = nmnist._target_order(10, 10, False, "train", nmnist.derive_sample_seed(2, "train/targets", 0))
    assert sorted(order) == list(range(10))


def test_pool_exhaustion_names_split(small_pool):
    spec = DatasetSpec(CanvasSpec(64), 22, 0, 0, 0.5)
    with pytest.raises(PoolExhaustedError) as err:
        build_dataset(small_pool, spec)
    assert err.value.split == "train"


def test_target_reuse_allows_larger_sets(small_pool):
    spec = DatasetSpec(CanvasSpec(64), 40, 0, 0, 0.5, allow_target_reuse=True)
    m = build_dataset(small_pool, spec)
    assert sum(r.label for r in m.records("train")) == 20
    order = nmnist._target_order(10, 20, True, "train", 0)
    assert np.bincount(order, minlength=10).tolist() == [2] * 10


def test_recorded_o2i_matches_bbox(small_pool):
    spec = DatasetSpec(CanvasSpec(128), 20, 10, 10, 0.5)
    m = build_dataset(small_pool, spec)
    for split in ("train", "val", "test"):
        for r in m.records(split):
            if r.label:
                x, y, w, h = r.object_bbox
                assert compute_o2i(w * h, 128 * 128) == r.o2i
            else:
                assert r.object_bbox is None


def test_build_deterministic_bytes(small_pool, tmp_path):
    spec = DatasetSpec(CanvasSpec(64), 20, 6, 6, 0.5, master_seed=9)
    build_dataset(small_pool, spec, tmp_path / "a")
    build_dataset(small_pool, spec, tmp_path / "b", workers=3)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) == 33
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_images_written_match_synthesis(small_pool, tmp_path):
    spec = DatasetSpec(CanvasSpec(64), 4, 0, 0, 0.5, master_seed=4)
    m = build_dataset(small_pool, spec, tmp_path)
    for r in m.records("train"):
        img = load_png(tmp_path / r.image_path)
        assert img.shape == (64, 64, 1)
        if r.label:
            x, y, w, h = r.object_bbox
            assert img[y:y + h, x:x + w].max() > 0


def test_idx_and_png_dir_ingestion(tmp_path):
    images = nmnist.read_idx(DATA / "images-idx3-ubyte.gz")
    labels = nmnist.read_idx(DATA / "labels-idx1-ubyte.gz")
    assert images.shape == (600, 28, 28) and labels.shape == (600,)
    for split in ("train", "val"):
        for i in range(6):
            d = tmp_path / split / str(i % 3 + 2)
            d.mkdir(parents=True, exist_ok=True)
            Image.fromarray(images[i]).save(d / f"{i}.png")
    pool = nmnist.load_pool(tmp_path)
    assert pool.sizes()["train"] == {"targets": 2, "clutter": 4}
    assert pool.sizes()["test"] == {"targets": 0, "clutter": 0}


def test_partition_is_disjoint(digit_pool):
    sizes = digit_pool.sizes()
    assert sum(v["targets"] + v["clutter"] for v in sizes.values()) == 600
    seen = set()
    for split in ("train", "val", "test"):
        for stack in (digit_pool.targets[split], digit_pool.clutter[split]):
            for d in stack:
                seen.add(d.tobytes())
    assert len(seen) == 600  # no digit image appears twice across splits


def test_pool_rejects_wrong_digit_size():
    with pytest.raises(ValueError):
        DigitPool({"train": np.zeros((2, 20, 20), np.uint8)}, {"train": np.zeros((2, 28, 28), np.uint8)})


# -- gaussian control ------------------------------------------------------


def test_gaussian_counts(tmp_path):
    spec = DatasetSpec(CanvasSpec(64), 64, 0, 0, 0.5, master_seed=3)
    m = build_gaussian_control(spec, tmp_path)
    labels = [r.label for r in m.records("train")]
    assert len(labels) == 64 and sum(labels) == 32
    assert load_png(tmp_path / m.records("train")[0].image_path).shape == (64, 64, 1)


def test_gaussian_deterministic(tmp_path):
    spec = DatasetSpec(CanvasSpec(32), 8, 2, 2, 0.5, master_seed=3)
    a = build_gaussian_control(spec, tmp_path / "a")
    b = build_gaussian_control(spec, tmp_path / "b")
    assert a == b
    for r in a.records("train"):
        assert (tmp_path / "a" / r.image_path).read_bytes() == (tmp_path / "b" / r.image_path).read_bytes()


def test_gaussian_pixel_moments():
    mean, std = 0.5, 0.25
    pixels = np.concatenate([nmnist.gaussian_image(64, s, mean, std).ravel() for s in range(8)])
    n = pixels.size
    # clipping at 0 and 1 is symmetric about 0.5, so the mean is unbiased
    assert abs(pixels.mean() - mean) < 3 * std / math.sqrt(n)
    clipped_std = pixels.std()
    assert 0.9 * std < clipped_std < std
    assert pixels.min() >= 0 and pixels.max() <= 1


def test_imbalance_applies_to_train_only(small_pool):
    spec = DatasetSpec(CanvasSpec(64), 10, 10, 10, balance=0.1, allow_target_reuse=True)
    m = build_dataset(small_pool, spec)
    assert [sum(r.label for r in m.records(s)) for s in ("train", "val", "test")] == [1, 5, 5]
    assert m.params["eval_balance"] == 0.5
