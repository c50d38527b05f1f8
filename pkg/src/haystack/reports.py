"""Reports over persisted run records. Every report is a pure function of the
records; the CSV is the data surface and the SVG is presentation only.
"""
from __future__ import annotations

import csv
import io
import json
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .training import RunRecord

KINDS = ("o2i_curve", "heatmap", "min_data_curve", "bars_rf", "bars_pooling", "fit_epochs", "success_counts",
         "imbalance_curve", "ap_curve")
RANDOM_ACCURACY = 0.5


@dataclass
class Table:
    kind: str
    columns: list[str]
    rows: list[dict]
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_cell(row.get(c)) for c in self.columns])
        return buf.getvalue()


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _tags(record: RunRecord) -> dict:
    return record.config.get("tags", {})


def _filter(records, filters: dict | None):
    if not filters:
        return list(records)
    out = []
    for r in records:
        tags = _tags(r)
        if all(str(tags.get(k)) in {str(v) for v in (vals if isinstance(vals, list) else [vals])}
               for k, vals in filters.items()):
            out.append(r)
    return out


def _key(value):
    try:
        return (0, float(value))
    except (TypeError, ValueError):
        return (1, str(value))


def _fit(record: RunRecord, threshold: float) -> bool:
    return record.max_train_accuracy > threshold


def heatmap_report(records: list[RunRecord], threshold: float = 0.7, filters: dict | None = None) -> Table:
    """Mean best-validation accuracy per (o2i, train_size) over runs whose
    training accuracy surpassed ``threshold``; empty cells stay blank."""
    records = _filter(records, filters)
    cells = defaultdict(list)
    grid_o2i, grid_size = set(), set()
    for r in records:
        t = _tags(r)
        key = (t.get("o2i"), t.get("train_size"))
        grid_o2i.add(key[0])
        grid_size.add(key[1])
        if _fit(r, threshold) and r.best_val_accuracy is not None:
            cells[key].append(r.best_val_accuracy)
    rows = []
    for o2i in sorted(grid_o2i, key=_key, reverse=True):
        for size in sorted(grid_size, key=_key):
            vals = cells.get((o2i, size), [])
            rows.append({"o2i": o2i, "train_size": size,
                         "mean_val_accuracy": statistics.fmean(vals) if vals else None,
                         "runs": len(vals), "empty": int(not vals)})
    return Table("heatmap", ["o2i", "train_size", "mean_val_accuracy", "runs", "empty"], rows,
                 {"threshold": threshold, "aggregation": "mean over qualifying runs"})


def _config_key(tags: dict) -> tuple:
    return tuple(str(tags.get(k)) for k in ("pooling", "rf", "capacity_scale", "balance"))


def min_dataset_report(records: list[RunRecord], targets=(0.7, 0.85), filters: dict | None = None) -> Table:
    """Smallest train size at which any configuration's seed-mean validation accuracy reaches each target."""
    records = _filter(records, filters)
    groups = defaultdict(list)
    for r in records:
        if r.best_val_accuracy is None:
            continue
        t = _tags(r)
        groups[(t.get("o2i"), t.get("train_size"), _config_key(t))].append(r.best_val_accuracy)
    means = defaultdict(list)  # (o2i, size) -> [config means]
    for (o2i, size, _), vals in groups.items():
        means[(o2i, size)].append(statistics.fmean(vals))
    o2is = sorted({k[0] for k in means}, key=_key, reverse=True)
    rows = []
    for o2i in o2is:
        sizes = sorted((k[1] for k in means if k[0] == o2i), key=_key)
        for target in targets:
            reached = [s for s in sizes if max(means[(o2i, s)]) >= target]
            rows.append({"o2i": o2i, "target": target, "min_train_size": reached[0] if reached else None,
                         "absent": int(not reached)})
    return Table("min_data_curve", ["o2i", "target", "min_train_size", "absent"], rows,
                 {"targets": list(targets), "aggregation": "max over configurations of the seed mean"})


def optimization_report(records: list[RunRecord], filters: dict | None = None) -> Table:
    """Mean time-to-fit over successful runs and success counts per (o2i, pooling)."""
    records = _filter(records, filters)
    cells = defaultdict(list)
    for r in records:
        t = _tags(r)
        cells[(t.get("o2i"), t.get("pooling"))].append(r)
    rows = []
    for key in sorted(cells, key=lambda k: (_key(k[0]), str(k[1]))):
        runs = cells[key]
        fits = [r.epoch_fit for r in runs if r.status == "converged" and r.epoch_fit is not None]
        rows.append({"o2i": key[0], "pooling": key[1], "mean_epoch_fit": statistics.fmean(fits) if fits else None,
                     "success_count": sum(r.status == "converged" for r in runs), "runs": len(runs)})
    return Table("optimization", ["o2i", "pooling", "mean_epoch_fit", "success_count", "runs"], rows)


def accuracy_report(records: list[RunRecord], kind: str, by: tuple[str, ...], fit_only: bool = False,
                    filters: dict | None = None) -> Table:
    """Mean/std test accuracy over seeds per group. With ``fit_only`` a run that
    never fit its training data contributes random accuracy and the group is flagged."""
    records = _filter(records, filters)
    groups = defaultdict(list)
    for r in records:
        t = _tags(r)
        groups[tuple(t.get(k) for k in by)].append(r)
    rows = []
    for key in sorted(groups, key=lambda k: tuple(_key(v) for v in k)):
        runs = groups[key]
        accs, unfit = [], 0
        for r in runs:
            if r.test_accuracy_at_best_val is None:
                continue
            if fit_only and r.status != "converged":
                accs.append(RANDOM_ACCURACY)
                unfit += 1
            else:
                accs.append(r.test_accuracy_at_best_val)
        row = dict(zip(by, key))
        row.update({"mean_test_accuracy": statistics.fmean(accs) if accs else None,
                    "std_test_accuracy": statistics.pstdev(accs) if accs else None,
                    "runs": len(runs), "unfit_runs": unfit})
        rows.append(row)
    return Table(kind, list(by) + ["mean_test_accuracy", "std_test_accuracy", "runs", "unfit_runs"], rows,
                 {"fit_only": fit_only})


def ap_report(records: list[RunRecord], runs_root: str | Path, split: str = "val",
              filters: dict | None = None) -> Table:
    """Mean saliency-detection AP per o2i, from ``saliency_<split>.json`` files inside run directories."""
    records = _filter(records, filters)
    groups = defaultdict(list)
    for r in records:
        path = Path(runs_root) / str(r.run_id) / "saliency" / f"saliency_{split}.json"
        if r.run_id and path.exists():
            groups[_tags(r).get("o2i")].append(json.loads(path.read_text())["average_precision"])
    rows = [{"o2i": o2i, "mean_ap": statistics.fmean(v), "std_ap": statistics.pstdev(v), "runs": len(v)}
            for o2i, v in sorted(groups.items(), key=lambda kv: _key(kv[0]), reverse=True)]
    return Table("ap_curve", ["o2i", "mean_ap", "std_ap", "runs"], rows, {"split": split})


def build_report(kind: str, records: list[RunRecord], threshold: float = 0.7, targets=(0.7, 0.85),
                 filters: dict | None = None, runs_root: str | Path | None = None) -> Table:
    if kind not in KINDS:
        raise ValueError(f"unknown report kind {kind!r}; expected one of {KINDS}")
    if not 0.5 < threshold < 1 or not all(0.5 < t < 1 for t in targets):
        raise ValueError("thresholds must lie in (0.5, 1)")
    if kind == "heatmap":
        return heatmap_report(records, threshold, filters)
    if kind == "min_data_curve":
        return min_dataset_report(records, targets, filters)
    if kind in ("fit_epochs", "success_counts"):
        table = optimization_report(records, filters)
        table.kind = kind
        return table
    if kind == "o2i_curve":
        return accuracy_report(records, kind, ("o2i",), filters=filters)
    if kind == "bars_rf":
        return accuracy_report(records, kind, ("o2i", "rf"), fit_only=True, filters=filters)
    if kind == "bars_pooling":
        return accuracy_report(records, kind, ("o2i", "pooling"), fit_only=True, filters=filters)
    if kind == "imbalance_curve":
        return accuracy_report(records, kind, ("balance", "pooling"), filters=filters)
    return ap_report(records, runs_root or ".", filters=filters)


# -- rendering ------------------------------------------------------------


def render_svg(table: Table) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "haystack"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    cols = table.columns
    value_col = next((c for c in cols if c.startswith("mean_") or c in ("min_train_size", "success_count")), None)
    if table.kind == "success_counts":
        value_col = "success_count"
    if table.kind == "heatmap":
        o2is = sorted({r["o2i"] for r in table.rows}, key=_key, reverse=True)
        sizes = sorted({r["train_size"] for r in table.rows}, key=_key)
        grid = [[float("nan")] * len(sizes) for _ in o2is]
        for r in table.rows:
            if r["mean_val_accuracy"] is not None:
                grid[o2is.index(r["o2i"])][sizes.index(r["train_size"])] = r["mean_val_accuracy"]
        im = ax.imshow(grid, vmin=0.5, vmax=1.0, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(sizes)), [str(s) for s in sizes])
        ax.set_yticks(range(len(o2is)), [f"{100 * float(o):.3g}%" for o in o2is])
        ax.set_xlabel("training set size")
        ax.set_ylabel("O2I")
        fig.colorbar(im, ax=ax)
    elif value_col is not None:
        group_col = next((c for c in cols if c in ("pooling", "rf", "target")), None)
        x_col = cols[0]
        series = defaultdict(list)
        for r in table.rows:
            if r.get(value_col) is not None:
                series[r.get(group_col) if group_col else ""].append((r[x_col], r[value_col]))
        for name, pts in sorted(series.items(), key=lambda kv: _key(kv[0])):
            pts.sort(key=lambda p: _key(p[0]))
            ax.plot([str(p[0]) for p in pts], [p[1] for p in pts], marker="o", label=str(name) if name != "" else None)
        if group_col:
            ax.legend(title=group_col)
        ax.set_xlabel(x_col)
        ax.set_ylabel(value_col)
    ax.set_title(table.kind)
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def write_report(table: Table, out_dir: str | Path, svg: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"{table.kind}.csv"}
    paths["csv"].write_text(table.to_csv(), newline="\n")
    if table.meta:
        paths["meta"] = out / f"{table.kind}.meta.json"
        paths["meta"].write_text(json.dumps(table.meta, sort_keys=True, indent=1) + "\n", newline="\n")
    if svg:
        paths["svg"] = out / f"{table.kind}.svg"
        paths["svg"].write_text(render_svg(table), newline="\n")
    return paths
