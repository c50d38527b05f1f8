"""Request and response models for the HTTP API."""
from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, Field, field_validator


class NmnistRequest(BaseModel):
    digits: str = Field(description="digit source directory (IDX files or per-class PNG folders)")
    out: str
    canvas: int = 64
    clutter: Optional[int] = None
    train: int = 11276
    val: int = 1972
    test: int = 4040
    balance: float = Field(0.5, gt=0, lt=1, description="positive fraction of the training split")
    eval_balance: float = Field(0.5, gt=0, lt=1, description="positive fraction of val and test")
    seed: int = Field(0, ge=0)
    allow_target_reuse: bool = False
    pool_split: Optional[dict[str, int]] = Field(
        None, description="digit counts per split when the source is not already split")
    pool_seed: int = 0
    workers: int = Field(1, ge=1)
    dataset_id: Optional[str] = None


class GaussianRequest(BaseModel):
    out: str
    canvas: int = 64
    train: int = 256
    val: int = 0
    test: int = 0
    balance: float = Field(0.5, gt=0, lt=1)
    seed: int = Field(0, ge=0)
    mean: float = 0.5
    std: float = Field(0.25, gt=0)
    dataset_id: Optional[str] = None


class CropRequest(BaseModel):
    slides: str = Field(description="JSON sidecar listing {image, mask, center_id, slide_id}")
    splits: dict[str, Any] | str = Field(description="center->split map, or a path to one")
    out: str
    size: int = 256
    bin: tuple[float, float] = (0.01, 0.1)
    per_region: int = 50
    max_attempts: int = 1000
    seed: int = Field(0, ge=0)

    @field_validator("bin")
    @classmethod
    def _bin_order(cls, v):
        if not 0 <= v[0] < v[1] <= 1:
            raise ValueError("bin must satisfy 0 <= lower < upper <= 1")
        return v


class DatasetResponse(BaseModel):
    dataset_id: str
    manifest: str
    checksum: str
    counts: dict[str, dict[str, int]]
    notes: list[str] = []


class TrainRequest(BaseModel):
    config: dict[str, Any]
    out: Optional[str] = None
    wait: bool = True


class RunResponse(BaseModel):
    run_id: str
    run_dir: str
    status: str
    epoch_fit: Optional[int] = None
    best_val_epoch: Optional[int] = None
    best_val_accuracy: Optional[float] = None
    test_accuracy_at_best_val: Optional[float] = None
    max_train_accuracy: float = 0.0
    epochs: int = 0


class SaliencyRequest(BaseModel):
    run: str
    split: Literal["train", "val", "test"] = "val"
    out: Optional[str] = None
    tolerance: float = Field(0.0, ge=0)
    overlays: int = Field(0, ge=0)


class SaliencyResponse(BaseModel):
    split: str
    average_precision: float
    images: int
    positives: int
    hit_rate: Optional[float] = None
    detections: str


class GridRequest(BaseModel):
    spec: str
    out: Optional[str] = None
    workers: int = Field(1, ge=1)
    wait: bool = True


class GridResponse(BaseModel):
    total: int
    complete: int
    pending: int
    completed_now: list[str] = []
    job_id: Optional[str] = None


class ReportRequest(BaseModel):
    kind: str
    runs: Optional[str] = None
    out: str
    threshold: float = Field(0.7, gt=0.5, lt=1)
    targets: list[float] = [0.7, 0.85]
    filters: dict[str, Any] = {}
    svg: bool = True


class ReportResponse(BaseModel):
    kind: str
    files: dict[str, str]
    rows: list[dict[str, Any]]


class ArchitectureResponse(BaseModel):
    rf: int
    scale: str
    receptive_field: int
    total_stride: int
    out_channels: int
    parameter_count: int


class JobResponse(BaseModel):
    job_id: str
    state: Literal["pending", "running", "done", "failed"]
    result: Optional[dict[str, Any]] = None
    error: Optional[str] = None
