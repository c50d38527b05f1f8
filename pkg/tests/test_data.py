import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from haystack.data import (
    DatasetManifest,
    SampleRecord,
    SchemaError,
    canonical_json,
    derive_sample_seed,
    load_png,
    read_manifest,
    save_png,
    write_manifest,
)


def test_seed_deterministic():
    assert derive_sample_seed(42, "train", 0) == derive_sample_seed(42, "train", 0)


def test_seed_differs_by_index():
    assert derive_sample_seed(42, "train", 0) != derive_sample_seed(42, "train", 1)


def test_seed_cross_product_distinct():
    seeds = {derive_sample_seed(42, split, i) for split in ("train", "val", "test") for i in range(1000)}
    assert len(seeds) == 3000
    assert all(0 <= s < 2 ** 64 for s in seeds)


def fixture_manifest(n=20, params=None):
    records = [
        SampleRecord(sample_id=f"train-{i:06d}", label=i % 2, image_path=f"train/{i}.png", o2i=784 / 4096,
                     sample_seed=derive_sample_seed(1, "train", i),
                     object_bbox=(i, 2 * i, 28, 28) if i % 2 else None)
        for i in range(n)
    ]
    return DatasetManifest("fixture", "nmnist", params or {"canvas_size": 64, "o2i": 784 / 4096, "balance": 0.1},
                           {"train": records}, master_seed=1)


def test_empty_manifest_round_trip(tmp_path):
    m = DatasetManifest("empty", "gaussian", {}, {}, master_seed=0)
    assert read_manifest(write_manifest(m, tmp_path)) == m


def test_manifest_round_trip_keeps_checksum(tmp_path):
    m = fixture_manifest()
    path = write_manifest(m, tmp_path)
    back = read_manifest(path)
    assert back == m
    assert back.checksum == m.checksum


def test_manifest_write_is_canonical(tmp_path):
    m = fixture_manifest()
    first = write_manifest(m, tmp_path / "a").read_bytes()
    second = write_manifest(read_manifest(tmp_path / "a"), tmp_path / "b").read_bytes()
    assert first == second
    assert b"\r\n" not in first


def test_o2i_out_of_range_rejected_on_read(tmp_path):
    path = write_manifest(fixture_manifest(), tmp_path)
    data = json.loads(path.read_text())
    data["splits"]["train"][3]["o2i"] = 1.5
    path.write_text(json.dumps(data))
    with pytest.raises(SchemaError) as err:
        read_manifest(path)
    assert err.value.field == "o2i"


@pytest.mark.parametrize("field, value", [("label", 2), ("sample_seed", -1), ("image_path", 5)])
def test_bad_fields_named(tmp_path, field, value):
    path = write_manifest(fixture_manifest(), tmp_path)
    data = json.loads(path.read_text())
    data["splits"]["train"][0][field] = value
    path.write_text(json.dumps(data))
    with pytest.raises(SchemaError) as err:
        read_manifest(path)
    assert err.value.field == field


def test_negative_with_bbox_rejected():
    with pytest.raises(SchemaError, match="object_bbox"):
        SampleRecord("a", 0, "a.png", 0.5, 1, object_bbox=(0, 0, 28, 28))


def test_duplicate_ids_rejected():
    r = SampleRecord("a", 0, "a.png", 0.5, 1)
    with pytest.raises(SchemaError):
        DatasetManifest("d", "nmnist", {}, {"train": [r, r]}, 0)


def test_unknown_split_rejected():
    with pytest.raises(SchemaError):
        DatasetManifest("d", "nmnist", {}, {"holdout": []}, 0)


def test_float_formatting():
    assert canonical_json(0.1) == "0.10000000000000001\n"
    assert canonical_json({"b": 1, "a": 2.0}) == '{\n "a": 2.0,\n "b": 1\n}\n'


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=1e-9, max_value=1.0), st.integers(0, 2 ** 64 - 1))
def test_float_round_trip(o2i, seed):
    r = SampleRecord("x", 0, "x.png", o2i, seed)
    m = DatasetManifest("d", "gaussian", {"o2i": o2i}, {"test": [r]}, seed)
    assert DatasetManifest.from_json(json.loads(canonical_json(m.to_json()))) == m


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(17, 23, 3)) / 255.0
    save_png(tmp_path / "x.png", img)
    np.testing.assert_array_equal(load_png(tmp_path / "x.png"), img.astype(np.float32))


def test_png_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        save_png(tmp_path / "x.png", np.full((4, 4, 1), 1.5))
