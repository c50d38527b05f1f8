"""Experiment grids: expansion into content-addressed runs, a write-once run store,
and a bounded worker pool that resumes by skipping completed run ids.
"""
from __future__ import annotations

import itertools
import json
import logging
import os
import shutil
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import ArchitectureSpec, as_scale
from .data import canonical_json, read_manifest, write_json
from .training import RunRecord, TrainConfig, config_hash, train_run

log = logging.getLogger(__name__)

RUNS_ENV = "HAYSTACK_RUNS"
AXES = ("canvas", "train_size", "balance", "rf", "capacity_scale", "pooling")
DATASET_AXES = ("canvas", "train_size", "balance")


class GridError(ValueError):
    pass


def default_runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


@dataclass
class GridSpec:
    axes: dict[str, list]
    datasets: str | dict[str, str]
    seeds: list[int] = field(default_factory=lambda: list(range(6)))
    base: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        if not self.axes or any(not v for v in self.axes.values()):
            raise GridError("every grid axis needs at least one value")
        unknown = set(self.axes) - set(AXES) - {"o2i"}
        if unknown:
            raise GridError(f"unknown grid axes {sorted(unknown)}; expected a subset of {AXES}")
        if "o2i" in self.axes:
            # canvas size is the o2i knob for nMNIST
            self.axes.setdefault("canvas", self.axes.pop("o2i"))
        if not self.seeds:
            raise GridError("grid needs at least one seed")

    @classmethod
    def from_json(cls, data: dict, base_dir: str | os.PathLike = ".") -> "GridSpec":
        return cls(axes={k: list(v) for k, v in data["axes"].items()}, datasets=data["datasets"],
                   seeds=list(data.get("seeds", range(6))), base=dict(data.get("base", {})),
                   base_dir=Path(base_dir))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GridSpec":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), path.parent)

    def points(self) -> list[dict]:
        names = [a for a in AXES if a in self.axes]
        return [dict(zip(names, values)) for values in itertools.product(*(self.axes[a] for a in names))]

    def dataset_for(self, point: dict) -> Path:
        keys = {k: point[k] for k in DATASET_AXES if k in point}
        if isinstance(self.datasets, dict):
            key = ",".join(f"{k}={keys[k]}" for k in DATASET_AXES if k in keys)
            if key not in self.datasets:
                raise GridError(f"no dataset bound to grid point {key!r}")
            rel = self.datasets[key]
        else:
            try:
                rel = self.datasets.format(**keys)
            except KeyError as exc:
                raise GridError(f"dataset template needs axis {exc.args[0]!r}") from None
        path = Path(rel)
        return path if path.is_absolute() else (self.base_dir / path)


@dataclass(frozen=True)
class GridEntry:
    run_id: str
    config: TrainConfig
    point: dict


def expand_grid(spec: GridSpec, store: "RunStore | None" = None) -> list[GridEntry]:
    """Cartesian product of the axes times seeds, seeds innermost.

    With ``store`` given, completed run ids are dropped (resume-by-skip).
    """
    entries = []
    manifests = {}
    for point in spec.points():
        path = spec.dataset_for(point).resolve()
        if path.is_dir():
            path = path / "manifest.json"
        if path not in manifests:
            if not path.exists():
                raise GridError(f"unresolvable dataset binding for {point}: {path} does not exist")
            manifests[path] = read_manifest(path)
        params = manifests[path].params
        tags = dict(point)
        tags["o2i"] = params.get("o2i")
        tags.setdefault("canvas", params.get("canvas_size", params.get("crop_size")))
        tags.setdefault("train_size", params.get("train_size", len(manifests[path].records("train"))))
        tags.setdefault("balance", params.get("balance", 0.5))
        if "capacity_scale" in tags:
            tags["capacity_scale"] = str(as_scale(tags["capacity_scale"]))
        base = dict(spec.base)
        arch = dict(base.pop("arch", {"rf": 33, "scale": "1/4"}))
        if "rf" in point:
            arch["rf"] = point["rf"]
        if "capacity_scale" in point:
            arch["scale"] = str(as_scale(point["capacity_scale"]))
        tags.setdefault("rf", arch.get("rf", 33))
        tags.setdefault("capacity_scale", str(as_scale(arch.get("scale", 1))))
        if "pooling" in point:
            base["pooling"] = point["pooling"]
        tags.setdefault("pooling", base.get("pooling", "max"))
        for seed in spec.seeds:
            config = TrainConfig(dataset=str(path), arch=ArchitectureSpec.from_json(arch), seed=int(seed),
                                 tags={**tags, "seed": int(seed)}, **base)
            entries.append(GridEntry(config_hash(config), config, point))
    if store is not None:
        entries = [e for e in entries if not store.is_complete(e.run_id)]
    return entries


class RunStore:
    """One directory per run id; a run becomes visible only via an atomic rename."""

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else default_runs_root()
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, run_id: str) -> Path:
        return self.root / run_id

    def is_complete(self, run_id: str) -> bool:
        return (self.path(run_id) / "record.json").exists()

    def run(self, entry: GridEntry) -> RunRecord:
        if self.is_complete(entry.run_id):
            return self.load(entry.run_id)
        tmp = self.root / f".tmp-{entry.run_id}-{uuid.uuid4().hex[:8]}"
        try:
            record, _ = train_run(entry.config, out_dir=tmp)
            record.run_id = entry.run_id
            record.save(tmp)
            try:
                os.rename(tmp, self.path(entry.run_id))
            except OSError:
                # another worker finished the same run id first; theirs stands
                log.info("run %s already committed", entry.run_id)
        finally:
            if tmp.exists():
                shutil.rmtree(tmp, ignore_errors=True)
        return self.load(entry.run_id)

    def load(self, run_id: str) -> RunRecord:
        record = RunRecord.load(self.path(run_id))
        record.run_id = run_id
        return record

    def run_ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir()
                      if p.is_dir() and not p.name.startswith(".") and (p / "record.json").exists())

    def records(self) -> list[RunRecord]:
        return [self.load(r) for r in self.run_ids()]

    def write_index(self) -> Path:
        index = {}
        for run_id in self.run_ids():
            data = json.loads((self.path(run_id) / "record.json").read_text())
            index[run_id] = {"status": data["status"], "tags": data["config"].get("tags", {})}
        path = self.root / "index.json"
        write_json(path, index)
        return path


def _run_one(root: str, entry: GridEntry) -> str:
    RunStore(root).run(entry)
    return entry.run_id


def run_grid(spec: GridSpec, store: RunStore, workers: int = 1) -> list[str]:
    """Train every pending grid entry; returns the run ids completed by this call."""
    pending = expand_grid(spec, store)
    log.info("grid: %d pending runs, %d workers", len(pending), workers)
    done = []
    if workers <= 1:
        for entry in pending:
            done.append(_run_one(str(store.root), entry))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for run_id in pool.map(_run_one, itertools.repeat(str(store.root)), pending):
                done.append(run_id)
    store.write_index()
    return done


def grid_summary(spec: GridSpec, store: RunStore) -> dict:
    entries = expand_grid(spec)
    complete = sum(store.is_complete(e.run_id) for e in entries)
    return {"total": len(entries), "complete": complete, "pending": len(entries) - complete,
            "run_ids": [e.run_id for e in entries]}


def spec_text(spec: GridSpec) -> str:
    return canonical_json({"axes": spec.axes, "datasets": spec.datasets, "seeds": spec.seeds, "base": spec.base})
