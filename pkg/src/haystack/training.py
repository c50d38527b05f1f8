"""Training protocol: RMSProp, step-decayed learning rate, gradient accumulation
to an effective batch of 32, per-epoch validation and best-validation selection.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import ArchitectureSpec
from .data import (
    DatasetManifest,
    SplitArrays,
    canonical_json,
    derive_sample_seed,
    load_split,
    manifest_root,
    read_manifest,
    write_json,
)
from .model import NeedleNet
from .pooling import POOLINGS

log = logging.getLogger(__name__)

FIT_ACCURACY = 0.99
RMSPROP = {"alpha": 0.99, "eps": 1e-8, "momentum": 0.0, "centered": False}


@dataclass(frozen=True)
class TrainConfig:
    dataset: str  # manifest path
    arch: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    pooling: str = "max"
    lr0: float = 5e-5
    decay_epochs: tuple[int, ...] = (80, 120, 160)
    decay_factor: float = 0.1
    max_epochs: int = 200
    effective_batch: int = 32
    micro_batch: int = 32
    seed: int = 0
    oversample_minority: bool = False
    stop_on_fit: bool = False
    dtype: str = "float32"
    eval_batch: int = 64
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.micro_batch < 1 or self.effective_batch % self.micro_batch:
            raise ValueError(f"micro_batch {self.micro_batch} must divide the effective batch {self.effective_batch}")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError("decay epochs must be strictly increasing")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))

    @property
    def accumulation_steps(self) -> int:
        return self.effective_batch // self.micro_batch

    def to_json(self) -> dict:
        out = asdict(self)
        out["arch"] = self.arch.to_json()
        out["decay_epochs"] = list(self.decay_epochs)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["arch"] = ArchitectureSpec.from_json(data.get("arch", {"rf": 33, "scale": 1}))
        if "decay_epochs" in data:
            data["decay_epochs"] = tuple(data["decay_epochs"])
        return cls(**data)

    def resolve_dataset(self, base: str | os.PathLike | None = None) -> Path:
        path = Path(self.dataset)
        return path if path.is_absolute() or base is None else Path(base) / path


def lr_at(epoch: int, config: TrainConfig) -> float:
    decays = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.lr0 * config.decay_factor ** decays


def resample_balanced(indices, labels, seed: int) -> np.ndarray:
    """Epoch order with the minority class topped up (with replacement) to the majority count."""
    indices, labels = np.asarray(indices), np.asarray(labels)
    pos, neg = indices[labels == 1], indices[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("oversampling needs both classes present")
    rng = np.random.default_rng(seed)
    major, minor = (pos, neg) if len(pos) >= len(neg) else (neg, pos)
    extra = rng.choice(minor, size=len(major) - len(minor), replace=True)
    return rng.permutation(np.concatenate([major, minor, extra]))


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class RunRecord:
    config: dict
    epochs: list[EpochMetrics] = field(default_factory=list)
    epoch_fit: int | None = None
    best_val_epoch: int | None = None
    best_val_accuracy: float | None = None
    test_accuracy_at_best_val: float | None = None
    max_train_accuracy: float = 0.0
    wall_clock: float = 0.0
    status: str = "converged"
    error_epoch: int | None = None
    optimizer: dict = field(default_factory=lambda: {"name": "rmsprop", **RMSPROP})
    run_id: str | None = None

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("epochs")
        return out

    @classmethod
    def from_json(cls, data: dict, epochs: list[EpochMetrics] | None = None) -> "RunRecord":
        return cls(epochs=epochs or [], **data)

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        names = list(EpochMetrics.__dataclass_fields__)
        writer.writerow(names)
        for m in self.epochs:
            writer.writerow([format(getattr(m, n), ".17g") if isinstance(getattr(m, n), float) else getattr(m, n)
                             for n in names])
        return buf.getvalue()

    def save(self, out_dir: str | os.PathLike):
        out = Path(out_dir)
        write_json(out / "record.json", self.to_json())
        (out / "trajectory.csv").write_text(self.trajectory_csv(), newline="\n")

    @classmethod
    def load(cls, run_dir: str | os.PathLike) -> "RunRecord":
        run_dir = Path(run_dir)
        data = json.loads((run_dir / "record.json").read_text())
        epochs = []
        traj = run_dir / "trajectory.csv"
        if traj.exists():
            for row in csv.DictReader(traj.read_text().splitlines()):
                epochs.append(EpochMetrics(int(row["epoch"]), float(row["lr"]), float(row["train_loss"]),
                                           float(row["train_accuracy"]), float(row["val_loss"]),
                                           float(row["val_accuracy"])))
        return cls.from_json(data, epochs)


class SplitData:
    """In-memory split; every read goes through ``batches`` so access can be audited."""

    def __init__(self, name: str, arrays: SplitArrays, dtype: torch.dtype,
                 on_access: Callable[[str], None] | None = None):
        self.name = name
        self.images = torch.from_numpy(arrays.images)
        self.labels = torch.from_numpy(arrays.labels)
        self.dtype = dtype
        self.on_access = on_access

    def __len__(self):
        return len(self.labels)

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return self.images[idx].to(self.dtype) / 255.0, self.labels[idx].to(self.dtype)

    def batches(self, size: int):
        if self.on_access is not None:
            self.on_access(self.name)
        for start in range(0, len(self), size):
            yield self.batch(torch.arange(start, min(start + size, len(self))))


def evaluate(model: NeedleNet, data: SplitData, batch: int) -> tuple[float, float]:
    """(mean BCE loss, accuracy) at threshold 0.5."""
    if len(data) == 0:
        return float("nan"), float("nan")
    model.eval()
    loss, correct = 0.0, 0
    with torch.no_grad():
        for x, y in data.batches(batch):
            logits = model(x)
            loss += F.binary_cross_entropy_with_logits(logits, y, reduction="sum").item()
            correct += int(((logits > 0).to(y.dtype) == y).sum())
    return loss / len(data), correct / len(data)


def seed_everything(seed: int):
    torch.manual_seed(seed & ((1 << 63) - 1))


def epoch_order(config: TrainConfig, labels: np.ndarray, epoch: int) -> np.ndarray:
    seed = derive_sample_seed(config.seed, "epoch", epoch)
    if config.oversample_minority:
        return resample_balanced(np.arange(len(labels)), labels, seed)
    return np.random.default_rng(seed).permutation(len(labels))


def train_run(config: TrainConfig, manifest: DatasetManifest | None = None, root: str | os.PathLike | None = None,
              out_dir: str | os.PathLike | None = None,
              on_access: Callable[[str], None] | None = None,
              splits: dict[str, SplitArrays] | None = None,
              on_epoch: Callable[[EpochMetrics, NeedleNet], None] | None = None) -> tuple[RunRecord, NeedleNet]:
    """Train one (config, seed) run. Returns the record and the best-validation model.

    ``splits`` may carry preloaded arrays; otherwise they are read from the
    manifest. ``on_access`` is called with the split name whenever a split is
    read, which lets callers audit that the test split is touched only once.
    ``on_epoch`` sees each epoch's metrics and the live (not best) model.
    """
    if manifest is None:
        path = config.resolve_dataset()
        manifest, root = read_manifest(path), manifest_root(path)
    if splits is None:
        splits = {s: load_split(manifest, root, s) for s in ("train", "val", "test")}
    dtype = torch.float64 if config.dtype == "float64" else torch.float32
    data = {s: SplitData(s, a, dtype, on_access) for s, a in splits.items()}
    train, val = data["train"], data["val"]
    if len(train) == 0:
        raise ValueError("training split is empty")
    channels = train.images.shape[1]

    seed_everything(config.seed)
    model = NeedleNet(config.arch, config.pooling, channels).to(dtype)
    opt = torch.optim.RMSprop(model.parameters(), lr=config.lr0, **RMSPROP)
    record = RunRecord(config=config.to_json())
    labels = train.labels.numpy()
    best_state, best_val = None, -1.0
    started = time.perf_counter()

    for epoch in range(config.max_epochs):
        lr = lr_at(epoch, config)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = epoch_order(config, labels, epoch)
        if on_access is not None:
            on_access("train")
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), config.effective_batch):
            batch_idx = order[start:start + config.effective_batch]
            opt.zero_grad(set_to_none=True)
            for m in range(0, len(batch_idx), config.micro_batch):
                x, y = train.batch(batch_idx[m:m + config.micro_batch])
                logits = model(x)
                loss = F.binary_cross_entropy_with_logits(logits, y, reduction="sum")
                (loss / len(batch_idx)).backward()
                total_loss += loss.item()
                correct += int(((logits.detach() > 0).to(y.dtype) == y).sum())
            opt.step()
        train_loss = total_loss / len(order)
        train_acc = correct / len(order)
        if not math.isfinite(train_loss):
            record.status, record.error_epoch = "error", epoch
            log.warning("non-finite training loss at epoch %d", epoch)
            break
        val_loss, val_acc = evaluate(model, val, config.eval_batch)
        metrics = EpochMetrics(epoch, lr, train_loss, train_acc, val_loss, val_acc)
        record.epochs.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics, model)
        record.max_train_accuracy = max(record.max_train_accuracy, train_acc)
        if record.epoch_fit is None and train_acc > FIT_ACCURACY:
            record.epoch_fit = epoch
        # strict improvement keeps the earliest epoch on ties
        score = val_acc if len(val) else train_acc
        if score > best_val:
            best_val, record.best_val_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
        if config.stop_on_fit and record.epoch_fit is not None:
            break

    record.wall_clock = time.perf_counter() - started
    if best_state is not None:
        model.load_state_dict(best_state)
        record.best_val_accuracy = best_val
        if "test" in data and len(data["test"]):
            record.test_accuracy_at_best_val = evaluate(model, data["test"], config.eval_batch)[1]
    if record.status != "error" and record.epoch_fit is None:
        record.status = "failed-to-fit"
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", config.to_json())
        record.save(out)
        torch.save(model.state_dict(), out / "checkpoint.pt")
    return record, model


def load_model(run_dir: str | os.PathLike, channels: int | None = None) -> tuple[TrainConfig, NeedleNet]:
    run_dir = Path(run_dir)
    config = TrainConfig.from_json(json.loads((run_dir / "config.json").read_text()))
    state = torch.load(run_dir / "checkpoint.pt", map_location="cpu", weights_only=True)
    if channels is None:
        channels = state["encoder.stem.0.weight"].shape[1]
    model = NeedleNet(config.arch, config.pooling, channels)
    model.load_state_dict(state)
    model.to(next(iter(state.values())).dtype)
    model.eval()
    return config, model


@dataclass
class RunSummary:
    mean: float | None
    std: float | None
    test_accuracies: list[float]
    success_count: int
    mean_epoch_fit: float | None
    runs: int


def select_best(runs: list[RunRecord]) -> RunSummary:
    """Mean and population std over seeds of the best-validation test accuracy."""
    accs = [r.test_accuracy_at_best_val for r in runs if r.test_accuracy_at_best_val is not None]
    fits = [r.epoch_fit for r in runs if r.status == "converged" and r.epoch_fit is not None]
    return RunSummary(
        mean=statistics.fmean(accs) if accs else None,
        std=statistics.pstdev(accs) if accs else None,
        test_accuracies=accs,
        success_count=sum(r.status == "converged" for r in runs),
        mean_epoch_fit=statistics.fmean(fits) if fits else None,
        runs=len(runs),
    )


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(canonical_json(config.to_json()).encode()).hexdigest()[:16]
