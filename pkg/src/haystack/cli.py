"""Command-line client. Every command is a request to the HTTP API: either a
running server (``--server`` / ``HAYSTACK_SERVER``) or an in-process app.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import httpx

SERVER_ENV = "HAYSTACK_SERVER"


class Client:
    def __init__(self, server: str | None):
        if server:
            self.http = httpx.Client(base_url=server, timeout=None)
        else:
            from fastapi.testclient import TestClient

            from .service import create_app

            self.http = TestClient(create_app())

    def call(self, method: str, path: str, payload: dict | None = None, params: dict | None = None):
        resp = self.http.request(method, path, json=payload, params=params)
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise click.ClickException(f"{resp.status_code}: {detail}")
        return resp.json()


def _abs(path: str | None) -> str | None:
    return None if path is None else str(Path(path).resolve())


def _echo(data):
    click.echo(json.dumps(data, indent=2, sort_keys=True))


@click.group()
@click.option("--server", envvar=SERVER_ENV, default=None, help="API base URL; in-process when omitted.")
@click.pass_context
def main(ctx, server):
    """Needle-in-a-haystack classification testbed."""
    ctx.obj = Client(server)


@main.group()
def synth():
    """Generate synthetic datasets."""


@synth.command("nmnist")
@click.option("--digits", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--canvas", default=64, show_default=True)
@click.option("--clutter", type=int, default=None, help="clutter digits per image (default by canvas)")
@click.option("--train", "train_size", default=11276, show_default=True)
@click.option("--val", "val_size", default=1972, show_default=True)
@click.option("--test", "test_size", default=4040, show_default=True)
@click.option("--balance", default=0.5, show_default=True, help="positive fraction of the training split")
@click.option("--eval-balance", default=0.5, show_default=True, help="positive fraction of val and test")
@click.option("--seed", default=0, show_default=True)
@click.option("--allow-target-reuse", is_flag=True)
@click.option("--pool-split", default=None, help="train:val:test digit counts for an unsplit source")
@click.option("--workers", default=1, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def synth_nmnist(client, digits, canvas, clutter, train_size, val_size, test_size, balance, eval_balance, seed,
                 allow_target_reuse, pool_split, workers, out):
    pool = None
    if pool_split:
        pool = dict(zip(("train", "val", "test"), (int(v) for v in pool_split.split(":"))))
    _echo(client.call("POST", "/synth/nmnist", {
        "digits": _abs(digits), "canvas": canvas, "clutter": clutter, "train": train_size, "val": val_size,
        "test": test_size, "balance": balance, "eval_balance": eval_balance, "seed": seed,
        "allow_target_reuse": allow_target_reuse,
        "pool_split": pool, "workers": workers, "out": _abs(out)}))


@synth.command("gaussian")
@click.option("--canvas", default=64, show_default=True)
@click.option("--train", "train_size", default=256, show_default=True)
@click.option("--val", "val_size", default=0, show_default=True)
@click.option("--test", "test_size", default=0, show_default=True)
@click.option("--balance", default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--mean", default=0.5, show_default=True)
@click.option("--std", default=0.25, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def synth_gaussian(client, canvas, train_size, val_size, test_size, balance, seed, mean, std, out):
    _echo(client.call("POST", "/synth/gaussian", {
        "canvas": canvas, "train": train_size, "val": val_size, "test": test_size, "balance": balance,
        "seed": seed, "mean": mean, "std": std, "out": _abs(out)}))


@main.command()
@click.option("--slides", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSON sidecar of {image, mask, center_id}")
@click.option("--splits", required=True, type=click.Path(exists=True, dir_okay=False), help="center->split JSON")
@click.option("--size", default=256, show_default=True)
@click.option("--bin", "o2i_bin", default="0.01:0.1", show_default=True, help="lower:upper O2I bin")
@click.option("--per-region", default=50, show_default=True)
@click.option("--max-attempts", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def crop(client, slides, splits, size, o2i_bin, per_region, max_attempts, seed, out):
    """Extract O2I-binned crops from annotated slides."""
    lo, hi = (float(v) for v in o2i_bin.split(":"))
    _echo(client.call("POST", "/crop", {
        "slides": _abs(slides), "splits": _abs(splits), "size": size, "bin": [lo, hi],
        "per_region": per_region, "max_attempts": max_attempts, "seed": seed, "out": _abs(out)}))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, type=click.Path(file_okay=False), help="run store root")
@click.pass_obj
def train(client, config_path, out):
    """Train one run from a JSON config."""
    config = json.loads(Path(config_path).read_text())
    dataset = Path(config["dataset"])
    if not dataset.is_absolute():
        config["dataset"] = str((Path(config_path).parent / dataset).resolve())
    _echo(client.call("POST", "/train", {"config": config, "out": _abs(out)}))


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="val", type=click.Choice(["train", "val", "test"]))
@click.option("--tolerance", default=0.0, show_default=True, help="hit radius in pixels around the box")
@click.option("--overlays", default=0, show_default=True, help="number of saliency PNGs to write")
@click.option("--out", default=None, type=click.Path(file_okay=False))
@click.pass_obj
def saliency(client, run_dir, split, tolerance, overlays, out):
    """Saliency-based localization and detection AP for a trained run."""
    _echo(client.call("POST", "/saliency", {"run": _abs(run_dir), "split": split, "tolerance": tolerance,
                                            "overlays": overlays, "out": _abs(out)}))


@main.command()
@click.option("--spec", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--workers", default=1, show_default=True)
@click.option("--out", default=None, type=click.Path(file_okay=False), help="run store root")
@click.pass_obj
def grid(client, spec, workers, out):
    """Run every pending point of an experiment grid."""
    _echo(client.call("POST", "/grid", {"spec": _abs(spec), "workers": workers, "out": _abs(out)}))


@main.command()
@click.option("--kind", required=True)
@click.option("--runs", default=None, type=click.Path(file_okay=False), help="run store root")
@click.option("--threshold", default=0.7, show_default=True)
@click.option("--targets", default="0.7,0.85", show_default=True)
@click.option("--filter", "filters", multiple=True, help="axis=value[,value...]")
@click.option("--no-svg", is_flag=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def report(client, kind, runs, threshold, targets, filters, no_svg, out):
    """Render a report (CSV + SVG) from persisted run records."""
    parsed = {}
    for f in filters:
        key, _, values = f.partition("=")
        parsed[key] = values.split(",")
    data = client.call("POST", "/report", {
        "kind": kind, "runs": _abs(runs), "threshold": threshold,
        "targets": [float(t) for t in targets.split(",")], "filters": parsed, "svg": not no_svg, "out": _abs(out)})
    _echo(data["files"])


@main.command()
@click.option("--rf", default=33, show_default=True)
@click.option("--scale", default="1", show_default=True)
@click.option("--pooling", default="max", show_default=True)
@click.pass_obj
def arch(client, rf, scale, pooling):
    """Receptive field and parameter count of an encoder."""
    _echo(client.call("GET", f"/architectures/{rf}", params={"scale": scale, "pooling": pooling}))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Start the HTTP API."""
    import uvicorn

    uvicorn.run("haystack.service:app", host=host, port=port)


if __name__ == "__main__":
    sys.exit(main())
