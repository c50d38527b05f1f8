"""O2I-binned classification crops from annotated slides (image + lesion mask + center).

Positive crops are sampled around each contiguous lesion region so that the
region's bounding box lies fully inside the crop, and kept only when the
lesion-pixel fraction of the crop falls inside the requested O2I bin.
Negative crops come from lesion-free slides and are kept only when their mean
green value (0-255 scale) is below 200, which rejects mostly-background crops.
Splits are assigned by acquisition center.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import (
    SPLITS,
    DatasetManifest,
    SampleRecord,
    check_image,
    derive_sample_seed,
    load_mask,
    load_png,
    save_mask,
    save_png,
    write_manifest,
)

log = logging.getLogger(__name__)

DEFAULT_BINS = ((0.001, 0.01), (0.01, 0.1), (0.1, 0.5), (0.5, 1.0))
GREEN_THRESHOLD = 200.0
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class SplitConfigError(ValueError):
    pass


@dataclass
class AnnotatedSlide:
    image: np.ndarray  # float [H, W, 3] in [0, 1]
    mask: np.ndarray  # uint8 [H, W] in {0, 1}
    center_id: int
    slide_id: str

    def __post_init__(self):
        self.image = check_image(self.image)
        if self.image.shape[2] != 3:
            raise ValueError(f"slide {self.slide_id}: expected an RGB image")
        self.mask = np.asarray(self.mask)
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(f"slide {self.slide_id}: mask {self.mask.shape} does not match image {self.image.shape[:2]}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"slide {self.slide_id}: mask values must be 0 or 1")
        self.mask = self.mask.astype(np.uint8)

    @property
    def healthy(self) -> bool:
        return not self.mask.any()


@dataclass(frozen=True)
class CropSpec:
    crop_size: int = 256
    o2i_bin: tuple[float, float] = (0.01, 0.1)
    crops_per_region: int = 50
    max_attempts_per_crop: int = 1000

    def __post_init__(self):
        lo, hi = self.o2i_bin
        if not (0 <= lo < hi <= 1):
            raise ValueError(f"O2I bin must satisfy 0 <= lower < upper <= 1, got {self.o2i_bin}")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")

    def in_bin(self, o2i: float) -> bool:
        lo, hi = self.o2i_bin
        return lo < o2i <= hi


@dataclass
class Region:
    pixels: np.ndarray  # [N, 2] (row, col)
    bbox: tuple[int, int, int, int]  # x, y, w, h

    @property
    def size(self) -> int:
        return len(self.pixels)


@dataclass
class Crop:
    image: np.ndarray
    mask: np.ndarray | None
    o2i: float | None
    offset: tuple[int, int]  # x, y
    lesion_pixels: int = 0


@dataclass
class CropReport:
    """Under-delivery notes, keyed by slide/region."""

    notes: list[str] = field(default_factory=list)

    def add(self, note: str):
        log.info(note)
        self.notes.append(note)


def find_regions(mask: np.ndarray) -> list[Region]:
    """8-connected lesion components, ordered by label (row-major first pixel)."""
    labeled, count = ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)
    regions = []
    for i, sl in enumerate(ndimage.find_objects(labeled), start=1):
        rows, cols = np.nonzero(labeled[sl] == i)
        pixels = np.stack([rows + sl[0].start, cols + sl[1].start], axis=1)
        bbox = (sl[1].start, sl[0].start, sl[1].stop - sl[1].start, sl[0].stop - sl[0].start)
        regions.append(Region(pixels, bbox))
    return regions


def containing_offsets(bbox, crop_size: int, height: int, width: int):
    """Inclusive ranges of crop corners (x, y) whose window contains ``bbox`` and stays in the slide."""
    x, y, w, h = bbox
    x_lo, x_hi = max(0, x + w - crop_size), min(x, width - crop_size)
    y_lo, y_hi = max(0, y + h - crop_size), min(y, height - crop_size)
    if x_lo > x_hi or y_lo > y_hi:
        return None
    return (x_lo, x_hi), (y_lo, y_hi)


def sample_positive_crops(slide: AnnotatedSlide, region: Region, spec: CropSpec, seed: int,
                          report: CropReport | None = None) -> list[Crop]:
    s = spec.crop_size
    ranges = containing_offsets(region.bbox, s, *slide.mask.shape)
    if ranges is None:
        if report is not None:
            report.add(f"{slide.slide_id} region {region.bbox}: does not fit a {s}px crop")
        return []
    (x_lo, x_hi), (y_lo, y_hi) = ranges
    rng = np.random.default_rng(seed)
    # integral image gives the lesion count of any window in O(1)
    integral = np.pad(slide.mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    crops = []
    for slot in range(spec.crops_per_region):
        for _ in range(spec.max_attempts_per_crop):
            x = int(rng.integers(x_lo, x_hi + 1))
            y = int(rng.integers(y_lo, y_hi + 1))
            lesion = int(integral[y + s, x + s] - integral[y, x + s] - integral[y + s, x] + integral[y, x])
            o2i = lesion / (s * s)
            if spec.in_bin(o2i):
                crops.append(Crop(slide.image[y:y + s, x:x + s].copy(), slide.mask[y:y + s, x:x + s].copy(),
                                  o2i, (x, y), lesion))
                break
        else:
            if report is not None:
                report.add(f"{slide.slide_id} region {region.bbox}: slot {slot} found no crop in "
                           f"{spec.o2i_bin} after {spec.max_attempts_per_crop} attempts")
            break
    return crops


def mean_green(crop: np.ndarray) -> float:
    return float(crop[:, :, 1].mean() * 255.0)


def sample_negative_crops(slide: AnnotatedSlide, spec: CropSpec, count: int, seed: int,
                          report: CropReport | None = None) -> list[Crop]:
    s = spec.crop_size
    h, w = slide.mask.shape
    if s > h or s > w or count <= 0:
        return []
    rng = np.random.default_rng(seed)
    crops = []
    for _ in range(count * spec.max_attempts_per_crop):
        x = int(rng.integers(0, w - s + 1))
        y = int(rng.integers(0, h - s + 1))
        window = slide.image[y:y + s, x:x + s]
        if mean_green(window) < GREEN_THRESHOLD:
            crops.append(Crop(window.copy(), None, None, (x, y)))
            if len(crops) == count:
                break
    if len(crops) < count and report is not None:
        report.add(f"{slide.slide_id}: only {len(crops)} of {count} negative crops passed the background filter")
    return crops


# -- ingestion ------------------------------------------------------------


def load_slides(sidecar: str | os.PathLike) -> list[AnnotatedSlide]:
    """Read a JSON list of {image, mask?, center_id, slide_id?}; paths relative to the sidecar."""
    sidecar = Path(sidecar)
    entries = json.loads(sidecar.read_text())
    slides = []
    for i, entry in enumerate(entries):
        image = load_png(sidecar.parent / entry["image"])
        if image.shape[2] == 1:
            image = np.repeat(image, 3, axis=2)
        mask = (load_mask(sidecar.parent / entry["mask"]) if entry.get("mask")
                else np.zeros(image.shape[:2], np.uint8))
        slides.append(AnnotatedSlide(image, mask, int(entry["center_id"]),
                                     str(entry.get("slide_id", Path(entry["image"]).stem or i))))
    return slides


def parse_split_map(data: dict) -> dict[int, str]:
    """Accepts {center: split} or {split: [centers]}."""
    out = {}
    for key, value in data.items():
        if key in SPLITS:
            for center in value:
                out[int(center)] = key
        else:
            if value not in SPLITS:
                raise SplitConfigError(f"center {key} mapped to unknown split {value!r}")
            out[int(key)] = value
    return out


# -- dataset --------------------------------------------------------------


def build_crop_dataset(slides: list[AnnotatedSlide], spec: CropSpec, split_map: dict[int, str], seed: int,
                       out_dir: str | os.PathLike | None = None, dataset_id: str | None = None):
    """Balanced, center-disjoint crop dataset. Returns (manifest, report)."""
    for slide in slides:
        if slide.center_id not in split_map:
            raise SplitConfigError(f"center {slide.center_id} (slide {slide.slide_id}) has no split assignment")
    out = Path(out_dir) if out_dir is not None else None
    report = CropReport()
    s = spec.crop_size
    o2i_nominal = spec.o2i_bin[1]
    splits = {}
    for split in SPLITS:
        members = [sl for sl in slides if split_map[sl.center_id] == split]
        if not members:
            continue
        positives = []
        for slide in members:
            if slide.healthy:
                continue
            for r, region in enumerate(find_regions(slide.mask)):
                region_seed = derive_sample_seed(seed, f"{split}/{slide.slide_id}/region", r)
                for k, crop in enumerate(sample_positive_crops(slide, region, spec, region_seed, report)):
                    positives.append((slide, f"{slide.slide_id}-r{r:04d}-c{k:03d}", crop, region_seed))

        healthy = [sl for sl in members if sl.healthy]
        negatives = []
        if positives and healthy:
            quota = len(positives)
            base, extra = divmod(quota, len(healthy))
            for j, slide in enumerate(healthy):
                want = base + (1 if j < extra else 0)
                neg_seed = derive_sample_seed(seed, f"{split}/{slide.slide_id}/negative", 0)
                for k, crop in enumerate(sample_negative_crops(slide, spec, want, neg_seed, report)):
                    negatives.append((slide, f"{slide.slide_id}-n{k:05d}", crop, neg_seed))

        n = min(len(positives), len(negatives))
        if n < max(len(positives), len(negatives)):
            report.add(f"{split}: balanced to {n} per class ({len(positives)} positive, {len(negatives)} negative)")
        records = []
        for slide, name, crop, crop_seed in positives[:n] + negatives[:n]:
            label = 1 if crop.mask is not None else 0
            image_path = f"{split}/{name}.png"
            mask_path = f"{split}/{name}-mask.png" if label else None
            if out is not None:
                save_png(out / image_path, crop.image)
                if label:
                    save_mask(out / mask_path, crop.mask)
            records.append(SampleRecord(
                sample_id=name, label=label, image_path=image_path, mask_path=mask_path,
                # negatives have no lesion; they carry the bin's nominal upper bound
                o2i=crop.o2i if label else o2i_nominal,
                sample_seed=crop_seed, lesion_pixels=crop.lesion_pixels,
                slide_id=slide.slide_id, center_id=slide.center_id))
        splits[split] = records

    params = {
        "generator": "lesioncrop",
        "crop_size": s,
        "o2i_bin": list(spec.o2i_bin),
        "crops_per_region": spec.crops_per_region,
        "max_attempts_per_crop": spec.max_attempts_per_crop,
        "split_map": {str(k): v for k, v in sorted(split_map.items())},
        "notes": list(report.notes),
    }
    lo, hi = spec.o2i_bin
    manifest = DatasetManifest(dataset_id or f"lesioncrop-{s}-{lo:g}-{hi:g}-s{seed}", "lesioncrop", params,
                               splits, seed)
    if out is not None:
        write_manifest(manifest, out)
    return manifest, report
