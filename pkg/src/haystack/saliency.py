"""Weakly supervised localization from input-gradient saliency, scored by average precision."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import load_split, manifest_root, read_manifest, save_png, write_json
from .training import load_model


@dataclass
class SaliencyMap:
    values: np.ndarray  # [H, W], non-negative
    sample_id: str = ""

    def rescaled(self) -> np.ndarray:
        """Copy rescaled to [0, 1] for display."""
        lo, hi = float(self.values.min()), float(self.values.max())
        if hi <= lo:
            return np.zeros_like(self.values)
        return (self.values - lo) / (hi - lo)


@dataclass(frozen=True)
class SaliencyDetection:
    x: int
    y: int
    confidence: float
    sample_id: str = ""


def compute_saliency(model: nn.Module, image: torch.Tensor, sample_id: str = "") -> SaliencyMap:
    """|d logit / d input| for one image [C, H, W], max-reduced over channels."""
    model.eval()
    param = next(model.parameters(), None)
    dtype = param.dtype if param is not None else image.dtype
    x = image.detach().to(dtype).unsqueeze(0).requires_grad_(True)
    logit = model(x).reshape(-1)[0]
    (grad,) = torch.autograd.grad(logit, x)
    values = grad[0].abs().amax(dim=0).cpu().numpy()
    return SaliencyMap(values, sample_id)


def localize(saliency: SaliencyMap) -> SaliencyDetection:
    values = saliency.values
    if values.size == 0:
        raise ValueError("empty saliency map")
    flat = int(np.argmax(values))  # first maximum in row-major order
    y, x = divmod(flat, values.shape[1])
    return SaliencyDetection(x, y, float(values[y, x]), saliency.sample_id)


def is_hit(detection: SaliencyDetection, bbox, tolerance: float = 0.0) -> bool:
    if bbox is None:
        return False
    bx, by, bw, bh = bbox
    dx = max(bx - detection.x, 0, detection.x - (bx + bw - 1))
    dy = max(by - detection.y, 0, detection.y - (by + bh - 1))
    return (dx * dx + dy * dy) <= tolerance * tolerance if tolerance else dx == 0 and dy == 0


def detection_ap(detections: list[SaliencyDetection], ground_truth: dict, tolerance: float = 0.0) -> float:
    """All-points average precision; one detection per image.

    ``ground_truth`` maps sample_id to a bbox (x, y, w, h) or None for images
    without the object. A detection outside its bbox counts as both a false
    positive and a missed object; any detection on an empty image is a false
    positive. Equal confidences enter the ranking together.
    """
    ids = [d.sample_id for d in detections]
    if len(set(ids)) != len(ids) or set(ids) != set(ground_truth):
        raise ValueError("detections and ground truth must cover the same images, one detection each")
    n_pos = sum(1 for b in ground_truth.values() if b is not None)
    if n_pos == 0:
        return 0.0
    hits = np.array([is_hit(d, ground_truth[d.sample_id], tolerance) for d in detections], dtype=np.int64)
    conf = np.array([d.confidence for d in detections], dtype=np.float64)
    order = np.argsort(-conf, kind="stable")
    conf, hits = conf[order], hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(1 - hits)
    # keep only the last index of every run of tied confidences
    last = np.r_[conf[1:] != conf[:-1], True]
    tp, fp = tp[last], fp[last]
    return _all_points_ap(tp / n_pos, tp / (tp + fp))


def _all_points_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    recall = np.concatenate([[0.0], recall])
    precision = np.concatenate([[0.0], precision])
    # precision envelope: best precision at this or any higher recall
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * envelope[1:]))


def detections_csv(rows: list[tuple[SaliencyDetection, bool]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "x", "y", "confidence", "hit"])
    for det, hit in rows:
        writer.writerow([det.sample_id, det.x, det.y, format(det.confidence, ".17g"), int(hit)])
    return buf.getvalue()


@dataclass
class SaliencyReport:
    split: str
    average_precision: float
    images: int
    positives: int
    hit_rate: float | None


def evaluate_run(run_dir, split: str = "val", out_dir=None, tolerance: float = 0.0,
                 overlays: int = 0) -> tuple[SaliencyReport, list[tuple[SaliencyDetection, bool]]]:
    """Saliency detections for every image of ``split`` under a trained run's checkpoint."""
    config, model = load_model(run_dir)
    manifest_path = Path(config.dataset)
    manifest = read_manifest(manifest_path)
    arrays = load_split(manifest, manifest_root(manifest_path), split)
    dtype = next(model.parameters()).dtype
    rows, dets, truth = [], [], {}
    for i, record in enumerate(arrays.records):
        image = torch.from_numpy(arrays.images[i]).to(dtype) / 255.0
        smap = compute_saliency(model, image, record.sample_id)
        det = localize(smap)
        truth[record.sample_id] = record.object_bbox
        dets.append(det)
        rows.append((det, is_hit(det, record.object_bbox, tolerance)))
        if out_dir is not None and i < overlays:
            save_png(Path(out_dir) / "overlays" / f"{record.sample_id}.png", smap.rescaled())
    ap = detection_ap(dets, truth, tolerance) if dets else 0.0
    positives = [hit for (det, hit), r in zip(rows, arrays.records) if r.label == 1]
    report = SaliencyReport(split, ap, len(rows), len(positives),
                            sum(positives) / len(positives) if positives else None)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"detections_{split}.csv").write_text(detections_csv(rows), newline="\n")
        write_json(out / f"saliency_{split}.json", {
            "split": split, "average_precision": ap, "images": len(rows), "positives": len(positives),
            "hit_rate": report.hit_rate, "tolerance": tolerance, "run": str(run_dir),
        })
    return report, rows
