"""Sample and manifest records, seed derivation, and image persistence."""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")
GENERATORS = ("nmnist", "lesioncrop", "gaussian")
MANIFEST_NAME = "manifest.json"
U64 = (1 << 64) - 1


class SchemaError(ValueError):
    """A manifest or record violates its schema; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def derive_sample_seed(master_seed: int, split: str, index: int) -> int:
    """Counter-based 64-bit seed for one sample; independent of generation order."""
    key = f"{int(master_seed) & U64}/{split}/{int(index) & U64}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


# -- images ---------------------------------------------------------------


def check_image(values: np.ndarray) -> np.ndarray:
    """Validate an [H, W, C] image in [0, 1]; returns it as float32."""
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[:, :, None]
    if values.ndim != 3 or values.shape[0] < 1 or values.shape[1] < 1:
        raise ValueError(f"image must be [H, W, C] with positive size, got shape {values.shape}")
    if values.shape[2] not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got {values.shape[2]}")
    if not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return values.astype(np.float32, copy=False)


def quantize(values: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(values, dtype=np.float64) * 255).astype(np.uint8)


def save_png(path: str | os.PathLike, values: np.ndarray):
    values = check_image(values)
    data = quantize(values)
    img = Image.fromarray(data[:, :, 0] if data.shape[2] == 1 else data, mode="L" if data.shape[2] == 1 else "RGB")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG", optimize=False)


def load_image_u8(path: str | os.PathLike) -> np.ndarray:
    """Read any PIL-supported image as uint8 [H, W, C] (C = 1 or 3)."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
        data = np.asarray(img, dtype=np.uint8)
    return data[:, :, None] if data.ndim == 2 else data


def load_png(path: str | os.PathLike) -> np.ndarray:
    return load_image_u8(path).astype(np.float32) / 255.0


def save_mask(path: str | os.PathLike, mask: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_mask(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as img:
        data = np.asarray(img.convert("L"))
    return (data > 127).astype(np.uint8)


# -- records --------------------------------------------------------------


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    label: int
    image_path: str
    o2i: float
    sample_seed: int
    object_bbox: tuple[int, int, int, int] | None = None  # x, y, w, h
    mask_path: str | None = None
    lesion_pixels: int | None = None
    slide_id: str | None = None
    center_id: int | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise SchemaError("label", f"must be 0 or 1, got {self.label!r}")
        if not (isinstance(self.o2i, (int, float)) and 0 < self.o2i <= 1):
            raise SchemaError("o2i", f"must lie in (0, 1], got {self.o2i!r}")
        if self.label == 0 and self.object_bbox is not None:
            raise SchemaError("object_bbox", "negative samples carry no object")
        if self.object_bbox is not None:
            if len(self.object_bbox) != 4 or any(int(v) != v for v in self.object_bbox):
                raise SchemaError("object_bbox", "must be four integers (x, y, w, h)")
            object.__setattr__(self, "object_bbox", tuple(int(v) for v in self.object_bbox))
        if not 0 <= self.sample_seed <= U64:
            raise SchemaError("sample_seed", "must be an unsigned 64-bit integer")

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None and f.name not in ("sample_id", "label", "image_path", "o2i", "sample_seed"):
                continue
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_json(cls, data: dict) -> "SampleRecord":
        known = {f.name for f in fields(cls)}
        for name in ("sample_id", "label", "image_path", "o2i", "sample_seed"):
            if name not in data:
                raise SchemaError(name, "missing")
        unknown = set(data) - known
        if unknown:
            raise SchemaError(sorted(unknown)[0], "unknown field")
        kwargs = dict(data)
        if kwargs.get("object_bbox") is not None:
            kwargs["object_bbox"] = tuple(kwargs["object_bbox"])
        for name, kind in (("sample_id", str), ("image_path", str)):
            if not isinstance(kwargs[name], kind):
                raise SchemaError(name, f"expected {kind.__name__}")
        for name in ("label", "sample_seed"):
            if isinstance(kwargs[name], bool) or not isinstance(kwargs[name], int):
                raise SchemaError(name, "expected integer")
        return cls(**kwargs)


def records_checksum(splits: dict[str, list[SampleRecord]]) -> str:
    payload = {name: [r.to_json() for r in splits[name]] for name in sorted(splits)}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    generator: str
    params: dict[str, Any]
    splits: dict[str, list[SampleRecord]]
    master_seed: int
    checksum: str = ""

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise SchemaError("generator", f"must be one of {GENERATORS}, got {self.generator!r}")
        for name, records in self.splits.items():
            if name not in SPLITS:
                raise SchemaError("splits", f"unknown split {name!r}")
            ids = [r.sample_id for r in records]
            if len(set(ids)) != len(ids):
                raise SchemaError("splits", f"duplicate sample_id in split {name!r}")
        if not 0 <= self.master_seed <= U64:
            raise SchemaError("master_seed", "must be an unsigned 64-bit integer")
        expected = records_checksum(self.splits)
        if not self.checksum:
            object.__setattr__(self, "checksum", expected)
        elif self.checksum != expected:
            raise SchemaError("checksum", "does not match the record list")

    def records(self, split: str) -> list[SampleRecord]:
        return self.splits.get(split, [])

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "generator": self.generator,
            "master_seed": self.master_seed,
            "params": self.params,
            "splits": {name: [r.to_json() for r in self.splits[name]] for name in SPLITS if name in self.splits},
            "checksum": self.checksum,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DatasetManifest":
        for name in ("dataset_id", "generator", "params", "splits", "master_seed", "checksum"):
            if name not in data:
                raise SchemaError(name, "missing")
        if not isinstance(data["splits"], dict):
            raise SchemaError("splits", "expected an object")
        splits = {}
        for name, records in data["splits"].items():
            if name not in SPLITS:
                raise SchemaError("splits", f"unknown split {name!r}")
            splits[name] = [SampleRecord.from_json(r) for r in records]
        return cls(data["dataset_id"], data["generator"], data["params"], splits,
                   data["master_seed"], data["checksum"])


# -- canonical JSON -------------------------------------------------------


def _format_float(value: float) -> str:
    if not math.isfinite(value):
        raise ValueError(f"non-finite float {value!r} cannot be serialized")
    text = format(value, ".17g")
    if "e" not in text and "." not in text:
        text += ".0"
    return text


def _encode(obj, indent: int, level: int) -> str:
    pad = "\n" + " " * (indent * (level + 1))
    end = "\n" + " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{json.dumps(str(k))}: {_encode(obj[k], indent, level + 1)}" for k in sorted(obj, key=str)]
        return "{" + pad + ("," + pad).join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + pad + ("," + pad).join(_encode(v, indent, level + 1) for v in obj) + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj, indent: int = 1) -> str:
    """Sorted keys, 17-significant-digit floats, LF line endings."""
    return _encode(obj, indent, 0) + "\n"


def write_json(path: str | os.PathLike, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_json(obj))


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    if path.is_dir() or path.suffix != ".json":
        path = path / MANIFEST_NAME
    write_json(path, manifest.to_json())
    return path


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise SchemaError("manifest", "expected a JSON object")
    return DatasetManifest.from_json(data)


def manifest_root(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path if path.is_dir() else path.parent


@dataclass
class SplitArrays:
    """One split loaded into memory: uint8 images [N, C, H, W] and labels [N]."""

    images: np.ndarray
    labels: np.ndarray
    records: list[SampleRecord] = field(default_factory=list)


def load_split(manifest: DatasetManifest, root: str | os.PathLike, split: str) -> SplitArrays:
    records = manifest.records(split)
    root = Path(root)
    if not records:
        return SplitArrays(np.zeros((0, 1, 1, 1), np.uint8), np.zeros(0, np.int64), [])
    images = np.stack([load_image_u8(root / r.image_path).transpose(2, 0, 1) for r in records])
    labels = np.array([r.label for r in records], dtype=np.int64)
    return SplitArrays(images, labels, list(records))
