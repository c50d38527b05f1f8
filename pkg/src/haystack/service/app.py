"""HTTP API over the core package. Long jobs (training, grids) can run in the background."""
from __future__ import annotations

import json
import logging
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import grid as gridmod
from .. import lesion, nmnist, reports, saliency
from ..backbone import ArchitectureSpec, receptive_field_of
from ..data import DatasetManifest, SchemaError
from ..model import parameter_count
from ..training import RunRecord, TrainConfig, config_hash, train_run
from .schemas import (
    ArchitectureResponse,
    CropRequest,
    DatasetResponse,
    GaussianRequest,
    GridRequest,
    GridResponse,
    JobResponse,
    NmnistRequest,
    ReportRequest,
    ReportResponse,
    RunResponse,
    SaliencyRequest,
    SaliencyResponse,
    TrainRequest,
)

log = logging.getLogger(__name__)


class Jobs:
    def __init__(self, workers: int = 1):
        self.pool = ThreadPoolExecutor(max_workers=workers)
        self.lock = threading.Lock()
        self.jobs: dict[str, JobResponse] = {}

    def submit(self, fn, *args) -> str:
        job_id = uuid.uuid4().hex[:12]
        with self.lock:
            self.jobs[job_id] = JobResponse(job_id=job_id, state="pending")

        def work():
            self._set(job_id, state="running")
            try:
                self._set(job_id, state="done", result=fn(*args).model_dump())
            except Exception as exc:  # reported through the job record
                log.exception("job %s failed", job_id)
                self._set(job_id, state="failed", error=str(exc))

        self.pool.submit(work)
        return job_id

    def _set(self, job_id, **kw):
        with self.lock:
            self.jobs[job_id] = self.jobs[job_id].model_copy(update=kw)

    def get(self, job_id: str) -> JobResponse:
        with self.lock:
            if job_id not in self.jobs:
                raise HTTPException(404, f"no job {job_id}")
            return self.jobs[job_id]


def _counts(manifest: DatasetManifest) -> dict:
    return {s: {"total": len(r), "positive": sum(x.label for x in r)} for s, r in manifest.splits.items()}


def _dataset_response(manifest: DatasetManifest, out: str, notes=()) -> DatasetResponse:
    return DatasetResponse(dataset_id=manifest.dataset_id, manifest=str(Path(out) / "manifest.json"),
                           checksum=manifest.checksum, counts=_counts(manifest), notes=list(notes))


def _run_response(record: RunRecord, run_dir: Path) -> RunResponse:
    return RunResponse(run_id=record.run_id or run_dir.name, run_dir=str(run_dir), status=record.status,
                       epoch_fit=record.epoch_fit, best_val_epoch=record.best_val_epoch,
                       best_val_accuracy=record.best_val_accuracy,
                       test_accuracy_at_best_val=record.test_accuracy_at_best_val,
                       max_train_accuracy=record.max_train_accuracy, epochs=len(record.epochs))


def _bad_request(exc: Exception):
    raise HTTPException(status_code=422, detail=str(exc)) from exc


def create_app() -> FastAPI:
    app = FastAPI(title="haystack", version="0.1.0")
    jobs = Jobs()
    app.state.jobs = jobs

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/architectures/{rf}", response_model=ArchitectureResponse)
    def architecture(rf: int, scale: str = "1", pooling: str = "max", channels: int = 1):
        try:
            spec = ArchitectureSpec(rf=rf, scale=scale)
        except ValueError as exc:
            _bad_request(exc)
        schedule = spec.schedule
        return ArchitectureResponse(rf=rf, scale=str(spec.scale), receptive_field=receptive_field_of(schedule),
                                    total_stride=schedule.total_stride, out_channels=schedule.out_width,
                                    parameter_count=parameter_count(spec, pooling, channels))

    @app.post("/synth/nmnist", response_model=DatasetResponse)
    def synth_nmnist(req: NmnistRequest):
        try:
            pool = nmnist.load_pool(req.digits, req.pool_split, req.pool_seed)
            spec = nmnist.DatasetSpec(nmnist.CanvasSpec(req.canvas, req.clutter), req.train, req.val, req.test,
                                      req.balance, req.seed, req.allow_target_reuse, req.dataset_id,
                                      eval_balance=req.eval_balance)
            manifest = nmnist.build_dataset(pool, spec, req.out, workers=req.workers)
        except (ValueError, nmnist.PoolExhaustedError, FileNotFoundError) as exc:
            _bad_request(exc)
        return _dataset_response(manifest, req.out)

    @app.post("/synth/gaussian", response_model=DatasetResponse)
    def synth_gaussian(req: GaussianRequest):
        try:
            spec = nmnist.DatasetSpec(nmnist.CanvasSpec(req.canvas, 0), req.train, req.val,
                                      req.test, req.balance, req.seed, dataset_id=req.dataset_id,
                                      gaussian_mean=req.mean, gaussian_std=req.std)
            manifest = nmnist.build_gaussian_control(spec, req.out)
        except ValueError as exc:
            _bad_request(exc)
        return _dataset_response(manifest, req.out)

    @app.post("/crop", response_model=DatasetResponse)
    def crop(req: CropRequest):
        try:
            split_data = req.splits if isinstance(req.splits, dict) else json.loads(Path(req.splits).read_text())
            spec = lesion.CropSpec(req.size, tuple(req.bin), req.per_region, req.max_attempts)
            manifest, report = lesion.build_crop_dataset(lesion.load_slides(req.slides), spec,
                                                         lesion.parse_split_map(split_data), req.seed, req.out)
        except (ValueError, FileNotFoundError) as exc:
            _bad_request(exc)
        return _dataset_response(manifest, req.out, report.notes)

    def do_train(config: TrainConfig, out: Path) -> RunResponse:
        run_id = config_hash(config)
        run_dir = out / run_id
        record, _ = train_run(config, out_dir=run_dir)
        record.run_id = run_id
        record.save(run_dir)
        return _run_response(record, run_dir)

    @app.post("/train")
    def train(req: TrainRequest):
        try:
            config = TrainConfig.from_json(req.config)
        except (TypeError, ValueError, KeyError) as exc:
            _bad_request(exc)
        out = Path(req.out) if req.out else gridmod.default_runs_root()
        if not req.wait:
            return {"job_id": jobs.submit(do_train, config, out)}
        try:
            return do_train(config, out)
        except (ValueError, FileNotFoundError, SchemaError) as exc:
            _bad_request(exc)

    @app.post("/saliency", response_model=SaliencyResponse)
    def run_saliency(req: SaliencyRequest):
        out = Path(req.out) if req.out else Path(req.run) / "saliency"
        try:
            report, _ = saliency.evaluate_run(req.run, req.split, out, req.tolerance, req.overlays)
        except (ValueError, FileNotFoundError) as exc:
            _bad_request(exc)
        return SaliencyResponse(split=report.split, average_precision=report.average_precision,
                                images=report.images, positives=report.positives, hit_rate=report.hit_rate,
                                detections=str(out / f"detections_{req.split}.csv"))

    def do_grid(spec: gridmod.GridSpec, store: gridmod.RunStore, workers: int) -> GridResponse:
        done = gridmod.run_grid(spec, store, workers)
        summary = gridmod.grid_summary(spec, store)
        return GridResponse(total=summary["total"], complete=summary["complete"], pending=summary["pending"],
                            completed_now=done)

    @app.post("/grid", response_model=GridResponse)
    def grid(req: GridRequest):
        try:
            spec = gridmod.GridSpec.load(req.spec)
            store = gridmod.RunStore(req.out)
            summary = gridmod.grid_summary(spec, store)
        except (gridmod.GridError, FileNotFoundError, KeyError) as exc:
            _bad_request(exc)
        if not req.wait:
            return GridResponse(total=summary["total"], complete=summary["complete"], pending=summary["pending"],
                                job_id=jobs.submit(do_grid, spec, store, req.workers))
        return do_grid(spec, store, req.workers)

    @app.get("/jobs/{job_id}", response_model=JobResponse)
    def job(job_id: str):
        return jobs.get(job_id)

    @app.get("/runs")
    def list_runs(root: str | None = None):
        store = gridmod.RunStore(root)
        return [{"run_id": r.run_id, "status": r.status, "tags": r.config.get("tags", {}),
                 "test_accuracy_at_best_val": r.test_accuracy_at_best_val} for r in store.records()]

    @app.get("/runs/{run_id}")
    def get_run(run_id: str, root: str | None = None):
        store = gridmod.RunStore(root)
        if not store.is_complete(run_id):
            raise HTTPException(404, f"no completed run {run_id}")
        record = store.load(run_id)
        data = record.to_json()
        data["epochs"] = [vars(m) for m in record.epochs]
        return data

    @app.post("/report", response_model=ReportResponse)
    def report(req: ReportRequest):
        store = gridmod.RunStore(req.runs)
        try:
            table = reports.build_report(req.kind, store.records(), req.threshold, tuple(req.targets),
                                         req.filters, store.root)
        except ValueError as exc:
            _bad_request(exc)
        files = reports.write_report(table, req.out, svg=req.svg)
        return ReportResponse(kind=table.kind, files={k: str(v) for k, v in files.items()}, rows=table.rows)

    return app


app = create_app()
