"""Needle-MNIST: one target digit hidden among clutter digits on a large canvas.

Digits keep their native 28x28 resolution; the object-to-image ratio is set
by the canvas size alone. Positives hold exactly one target digit (drawn
without replacement per split) plus ``n`` clutter digits; negatives hold
``n + 1`` clutter digits. Clutter is always drawn with replacement.
"""
from __future__ import annotations

import gzip
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import (
    SPLITS,
    DatasetManifest,
    SampleRecord,
    derive_sample_seed,
    load_image_u8,
    save_png,
    write_manifest,
)

log = logging.getLogger(__name__)

DIGIT = 28
TARGET_LABEL = 3
DEFAULT_CLUTTER = {64: 2, 128: 5, 256: 25, 512: 100, 1024: 400}
STUDY_BALANCES = (0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99)


class PoolExhaustedError(RuntimeError):
    def __init__(self, split: str, needed: int, available: int):
        super().__init__(f"split {split!r} needs {needed} target digits but the pool holds {available}")
        self.split = split


def compute_o2i(object_area: float, image_area: float) -> float:
    if object_area <= 0 or image_area <= 0:
        raise ValueError("areas must be positive")
    if object_area > image_area:
        raise ValueError(f"object area {object_area} exceeds image area {image_area}")
    return object_area / image_area


# -- digit pools ----------------------------------------------------------


@dataclass
class DigitPool:
    """Per-split uint8 digit stacks [N, 28, 28]; targets are 3s, clutter everything else."""

    targets: dict[str, np.ndarray]
    clutter: dict[str, np.ndarray]

    def __post_init__(self):
        for kind in (self.targets, self.clutter):
            for split, stack in kind.items():
                if split not in SPLITS:
                    raise ValueError(f"unknown split {split!r}")
                if stack.ndim != 3 or stack.shape[1:] != (DIGIT, DIGIT):
                    raise ValueError(f"digits must be {DIGIT}x{DIGIT}, got {stack.shape[1:]}")

    def sizes(self) -> dict[str, dict[str, int]]:
        return {s: {"targets": len(self.targets.get(s, ())), "clutter": len(self.clutter.get(s, ()))}
                for s in SPLITS}

    @classmethod
    def from_labeled(cls, split_images: dict[str, np.ndarray], split_labels: dict[str, np.ndarray]) -> "DigitPool":
        targets, clutter = {}, {}
        for split, images in split_images.items():
            labels = np.asarray(split_labels[split])
            images = to_uint8(images)
            targets[split] = images[labels == TARGET_LABEL]
            clutter[split] = images[labels != TARGET_LABEL]
        return cls(targets, clutter)


def to_uint8(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images
    return np.round(np.clip(images, 0, 1) * 255).astype(np.uint8)


def partition(images: np.ndarray, labels: np.ndarray, sizes: dict[str, int], seed: int):
    """Split one labeled digit collection into disjoint per-split subsets."""
    if sum(sizes.values()) > len(images):
        raise ValueError(f"requested {sum(sizes.values())} digits from a collection of {len(images)}")
    order = np.random.default_rng(seed).permutation(len(images))
    out_images, out_labels, start = {}, {}, 0
    for split in SPLITS:
        if split not in sizes:
            continue
        idx = np.sort(order[start:start + sizes[split]])
        out_images[split], out_labels[split] = images[idx], labels[idx]
        start += sizes[split]
    return out_images, out_labels


def read_idx(path: str | os.PathLike) -> np.ndarray:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        zero, dtype_code, ndim = struct.unpack(">HBB", fh.read(4))
        if zero != 0 or dtype_code != 0x08:
            raise ValueError(f"{path}: not an unsigned-byte IDX file")
        shape = struct.unpack(">" + "I" * ndim, fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    return data.reshape(shape)


def write_idx(path: str | os.PathLike, array: np.ndarray):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, 0x08, array.ndim))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def load_png_dir(root: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Digits from ``root/<label>/*.png``."""
    images, labels = [], []
    for label_dir in sorted(Path(root).iterdir()):
        if not label_dir.is_dir() or not label_dir.name.isdigit():
            continue
        for png in sorted(label_dir.glob("*.png")):
            images.append(load_image_u8(png)[:, :, 0])
            labels.append(int(label_dir.name))
    if not images:
        raise FileNotFoundError(f"no digit PNGs under {root}")
    return np.stack(images), np.array(labels)


def load_pool(source: str | os.PathLike, split_sizes: dict[str, int] | None = None, seed: int = 0) -> DigitPool:
    """Load a digit pool from a directory.

    Accepted layouts: per-split IDX pairs (``{split}-images-idx3-ubyte`` and
    ``{split}-labels-idx1-ubyte``, optionally gzipped), one unsplit IDX pair
    (``images-idx3-ubyte``/``labels-idx1-ubyte``), per-split PNG directories
    (``{split}/<label>/*.png``) or one unsplit PNG directory. Unsplit sources
    need ``split_sizes`` and are partitioned with ``seed``.
    """
    root = Path(source)

    def idx_pair(prefix):
        for suffix in ("", ".gz"):
            img = root / f"{prefix}images-idx3-ubyte{suffix}"
            lab = root / f"{prefix}labels-idx1-ubyte{suffix}"
            if img.exists() and lab.exists():
                return read_idx(img), read_idx(lab)
        return None

    per_split = {}
    for split in SPLITS:
        pair = idx_pair(f"{split}-")
        if pair is None and (root / split).is_dir():
            pair = load_png_dir(root / split)
        if pair is not None:
            per_split[split] = pair
    if per_split:
        return DigitPool.from_labeled({s: p[0] for s, p in per_split.items()},
                                      {s: p[1] for s, p in per_split.items()})
    pair = idx_pair("") or load_png_dir(root)
    if split_sizes is None:
        raise ValueError("an unsplit digit source needs split_sizes")
    images, labels = partition(pair[0], pair[1], split_sizes, seed)
    return DigitPool.from_labeled(images, labels)


# -- canvases -------------------------------------------------------------


@dataclass(frozen=True)
class CanvasSpec:
    canvas_size: int
    clutter_count: int | None = None

    def __post_init__(self):
        if self.canvas_size < DIGIT:
            raise ValueError(f"canvas must be at least {DIGIT} pixels, got {self.canvas_size}")
        if self.clutter_count is None:
            object.__setattr__(self, "clutter_count", default_clutter(self.canvas_size))
        if self.clutter_count < 0:
            raise ValueError("clutter_count must be non-negative")

    @property
    def o2i(self) -> float:
        return compute_o2i(DIGIT * DIGIT, self.canvas_size ** 2)


def default_clutter(canvas_size: int) -> int:
    if canvas_size in DEFAULT_CLUTTER:
        return DEFAULT_CLUTTER[canvas_size]
    # constant digit density matched to the 1024 canvas
    return max(0, round(401 * canvas_size ** 2 / 1024 ** 2) - 1)


def synthesize_sample(targets: np.ndarray | None, clutter: np.ndarray, canvas: CanvasSpec, label: int,
                      seed: int, target_index: int | None = None):
    """Compose one canvas. Returns (float32 image [S, S, 1], bbox or None)."""
    if len(clutter) == 0:
        raise ValueError("clutter pool is empty")
    if label == 1 and (targets is None or target_index is None):
        raise ValueError("positive samples need a target digit index")
    rng = np.random.default_rng(seed)
    size, n = canvas.canvas_size, canvas.clutter_count
    digits = [targets[target_index]] if label == 1 else []
    digits += [clutter[i] for i in rng.integers(0, len(clutter), size=n + (1 - label))]
    corners = rng.integers(0, size - DIGIT + 1, size=(len(digits), 2))

    img = np.zeros((size, size), dtype=np.uint8)
    for digit, (x, y) in zip(digits, corners):
        window = img[y:y + DIGIT, x:x + DIGIT]
        np.maximum(window, digit, out=window)
    bbox = None
    if label == 1:
        x, y = corners[0]
        bbox = (int(x), int(y), DIGIT, DIGIT)
    return img[:, :, None].astype(np.float32) / 255.0, bbox


# -- datasets -------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    canvas: CanvasSpec
    train_size: int
    val_size: int
    test_size: int
    balance: float = 0.5
    master_seed: int = 0
    allow_target_reuse: bool = False
    dataset_id: str | None = None
    gaussian_mean: float = 0.5
    gaussian_std: float = 0.25
    eval_balance: float = 0.5  # val/test stay balanced when only the training balance is studied

    def __post_init__(self):
        for name in ("balance", "eval_balance"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        for name in ("train_size", "val_size", "test_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}

    def positives(self, split: str) -> int:
        balance = self.balance if split == "train" else self.eval_balance
        return positive_count(self.split_sizes()[split], balance)

    def params(self, generator: str) -> dict:
        out = {
            "generator": generator,
            "canvas_size": self.canvas.canvas_size,
            "clutter_count": self.canvas.clutter_count,
            "o2i": self.canvas.o2i,
            "train_size": self.train_size,
            "val_size": self.val_size,
            "test_size": self.test_size,
            "balance": self.balance,
            "eval_balance": self.eval_balance,
            "allow_target_reuse": self.allow_target_reuse,
        }
        if generator == "gaussian":
            del out["clutter_count"], out["allow_target_reuse"]
            out["gaussian_mean"], out["gaussian_std"] = self.gaussian_mean, self.gaussian_std
        return out


def positive_count(size: int, balance: float) -> int:
    # exact rational ceil so 100 * 0.99 gives 99, not 100
    return math.ceil(Fraction(size) * Fraction(repr(balance)))


def _labels(n: int, n_pos: int, seed: int) -> np.ndarray:
    labels = np.zeros(n, dtype=np.int64)
    labels[np.random.default_rng(seed).permutation(n)[:n_pos]] = 1
    return labels


def _target_order(n_targets: int, needed: int, reuse: bool, split: str, seed: int) -> np.ndarray:
    if needed > n_targets and not reuse:
        raise PoolExhaustedError(split, needed, n_targets)
    if needed and not n_targets:
        raise PoolExhaustedError(split, needed, 0)
    rng = np.random.default_rng(seed)
    rounds = [rng.permutation(n_targets) for _ in range(max(1, math.ceil(needed / max(n_targets, 1))))]
    return np.concatenate(rounds)[:needed]


def _dataset_id(spec: DatasetSpec, generator: str) -> str:
    return spec.dataset_id or f"{generator}-c{spec.canvas.canvas_size}-n{spec.train_size}-b{spec.balance:g}-s{spec.master_seed}"


def build_dataset(pool: DigitPool, spec: DatasetSpec, out_dir: str | os.PathLike | None = None,
                  workers: int = 1) -> DatasetManifest:
    """Generate every split; writes PNGs and ``manifest.json`` when ``out_dir`` is given."""
    out = Path(out_dir) if out_dir is not None else None
    canvas = spec.canvas
    splits: dict[str, list[SampleRecord]] = {}
    jobs = []
    for split, size in spec.split_sizes().items():
        n_pos = spec.positives(split)
        targets = pool.targets.get(split, np.zeros((0, DIGIT, DIGIT), np.uint8))
        clutter = pool.clutter.get(split)
        if size and (clutter is None or len(clutter) == 0):
            raise ValueError(f"split {split!r} has no clutter digits")
        order = _target_order(len(targets), n_pos, spec.allow_target_reuse, split,
                              derive_sample_seed(spec.master_seed, f"{split}/targets", 0))
        labels = _labels(size, n_pos, derive_sample_seed(spec.master_seed, f"{split}/labels", 0))
        pos_rank = np.cumsum(labels) - 1
        records = []
        for i in range(size):
            seed = derive_sample_seed(spec.master_seed, split, i)
            label = int(labels[i])
            target_index = int(order[pos_rank[i]]) if label else None
            sample_id = f"{split}-{i:06d}"
            path = f"{split}/{sample_id}.png"
            jobs.append((targets, clutter, label, seed, target_index, path))
            records.append((sample_id, label, path, seed))
        splits[split] = records

    def render(job):
        targets, clutter, label, seed, target_index, path = job
        image, bbox = synthesize_sample(targets, clutter, canvas, label, seed, target_index)
        if out is not None:
            save_png(out / path, image)
        return bbox

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            bboxes = list(ex.map(render, jobs))
    else:
        bboxes = [render(job) for job in jobs]

    it = iter(bboxes)
    final = {}
    for split, records in splits.items():
        final[split] = [
            SampleRecord(sample_id=sid, label=label, image_path=path, o2i=canvas.o2i, sample_seed=seed,
                         object_bbox=next(it))
            for sid, label, path, seed in records
        ]
    params = spec.params("nmnist")
    params["pool_sizes"] = pool.sizes()
    manifest = DatasetManifest(_dataset_id(spec, "nmnist"), "nmnist", params, final, spec.master_seed)
    if out is not None:
        write_manifest(manifest, out)
    log.info("built %s: %s", manifest.dataset_id, {s: len(r) for s, r in final.items()})
    return manifest


def build_gaussian_control(spec: DatasetSpec, out_dir: str | os.PathLike | None = None) -> DatasetManifest:
    """Same counts, shapes and balance as nMNIST, but every pixel is clipped N(mean, std^2) noise."""
    out = Path(out_dir) if out_dir is not None else None
    size = spec.canvas.canvas_size
    splits = {}
    for split, n in spec.split_sizes().items():
        labels = _labels(n, spec.positives(split), derive_sample_seed(spec.master_seed, f"{split}/labels", 0))
        records = []
        for i in range(n):
            seed = derive_sample_seed(spec.master_seed, split, i)
            sample_id = f"{split}-{i:06d}"
            path = f"{split}/{sample_id}.png"
            if out is not None:
                save_png(out / path, gaussian_image(size, seed, spec.gaussian_mean, spec.gaussian_std))
            records.append(SampleRecord(sample_id=sample_id, label=int(labels[i]), image_path=path,
                                        o2i=spec.canvas.o2i, sample_seed=seed))
        splits[split] = records
    manifest = DatasetManifest(_dataset_id(spec, "gaussian"), "gaussian", spec.params("gaussian"), splits,
                               spec.master_seed)
    if out is not None:
        write_manifest(manifest, out)
    return manifest


def gaussian_image(size: int, seed: int, mean: float = 0.5, std: float = 0.25) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.clip(rng.normal(mean, std, size=(size, size, 1)), 0, 1).astype(np.float32)
