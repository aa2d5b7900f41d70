"""Batch command line: optimize scenes, render layouts, sweep, evaluate,
script edits, and launch the service."""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from .config import (
    RunConfig,
    run_config_from_dict,
    scene_config_from_dict,
)
from .metrics import MetricsReport, PairRecord, consistency, mask_iou, ssim, visual_consistency
from .sampler import render_final
from .scene import Layout
from .serialize import (
    dumps,
    load_checkpoint,
    load_png,
    save_checkpoint,
    save_png,
    save_raw_grid,
)
from .service import effective_denoiser, optimize_record, render_record
from .store import SceneRecord, edit_from_dict


def _fail(message: str) -> None:
    raise click.ClickException(message)


def _load_json(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        _fail(f"no such file: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        _fail(f"invalid JSON in {path}: {exc}")


def _run_config(config_path: str | None, **overrides) -> RunConfig:
    data = _load_json(config_path) if config_path else {}
    for key, val in overrides.items():
        if val is not None:
            data[key] = val
    try:
        return run_config_from_dict(data)
    except Exception as exc:
        _fail(f"invalid run config: {exc}")


def _load_mask_png(path) -> np.ndarray:
    """Masks are plain black/white images, thresholded at half range."""
    from PIL import Image

    img = np.asarray(Image.open(path).convert("L"))
    return (img > 127).astype(np.float64)


def _parse_layout(text: str) -> list[tuple[int, int]]:
    """Parse "dx,dy;dx,dy;..." into offset pairs."""
    try:
        return [
            (int(dx), int(dy))
            for dx, dy in (pair.split(",") for pair in text.split(";"))
        ]
    except ValueError as exc:
        _fail(f"bad layout spec {text!r}: {exc}")


run_options = [
    click.option("--config", "config_path", type=str, default=None,
                 help="run config JSON file"),
    click.option("--seed", type=int, default=None, help="override scene seed"),
    click.option("--steps", "T", type=int, default=None, help="diffusion steps T"),
    click.option("--tau", type=int, default=None, help="trailing image-diffusion steps"),
    click.option("--views", "N", type=int, default=None, help="layouts per step N"),
    click.option("--guidance", type=float, default=None),
    click.option("--blend", type=click.Choice(["binary", "soft"]), default=None),
    click.option("--denoiser", "denoiser_kind",
                 type=click.Choice(["pointmass", "gaussian", "remote"]), default=None),
]


def with_run_options(fn):
    for opt in reversed(run_options):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Layered scene diffusion engine."""


@main.command()
@click.option("--scene", "scene_path", required=True, help="scene config JSON")
@click.option("--out", "out_path", required=True, help="checkpoint output path")
@with_run_options
def optimize(scene_path, out_path, config_path, seed, T, tau, N, guidance, blend,
             denoiser_kind):
    """Optimize a scene config into a checkpoint file."""
    scene_data = _load_json(scene_path)
    if seed is not None:
        scene_data["seed"] = seed
    try:
        sc = scene_config_from_dict(scene_data)
    except Exception as exc:
        _fail(f"invalid scene config: {exc}")
    overrides = dict(T=T, tau=tau, N=N, guidance=guidance, blend=blend)
    rc = _run_config(config_path, **overrides)
    if denoiser_kind is not None:
        from dataclasses import replace

        rc = replace(rc, denoiser=replace(rc.denoiser, kind=denoiser_kind))
    record = SceneRecord(id="cli", scene_config=sc, run_config=rc)
    t0 = time.perf_counter()
    record = optimize_record(record)
    elapsed = time.perf_counter() - t0
    save_checkpoint(record.base_checkpoint, out_path)
    sidecar = {
        "scene_config": scene_data,
        "run_config": json.loads(dumps(_rc_dict(rc))),
        "seconds": elapsed,
    }
    Path(str(out_path) + ".manifest.json").write_text(dumps(sidecar))
    click.echo(f"wrote {out_path} ({elapsed:.2f}s)")


def _rc_dict(rc: RunConfig) -> dict:
    from .config import run_config_to_dict

    return run_config_to_dict(rc)


def _checkpoint_and_denoiser(checkpoint_path: str):
    cp = load_checkpoint(checkpoint_path)
    manifest_path = Path(str(checkpoint_path) + ".manifest.json")
    if not manifest_path.exists():
        _fail(f"missing manifest next to {checkpoint_path}")
    manifest = json.loads(manifest_path.read_text())
    record = SceneRecord(
        id="cli",
        scene_config=scene_config_from_dict(manifest["scene_config"]),
        run_config=run_config_from_dict(manifest["run_config"]),
        base_checkpoint=cp,
        edits=manifest.get("edits", []),
    )
    return record, manifest


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True)
@click.option("--layout", "layout_text", default=None,
              help='offsets "dx,dy;dx,dy;..." (default: stored offsets)')
@click.option("--out", "out_path", required=True, help="PNG output path")
@click.option("--raw", "raw_path", default=None, help="also write raw float32 grid")
@click.option("--global-prompt", default=None)
def render(checkpoint_path, layout_text, out_path, raw_path, global_prompt):
    """Render a checkpoint at a layout."""
    record, _ = _checkpoint_and_denoiser(checkpoint_path)
    layout = _parse_layout(layout_text) if layout_text else None
    t0 = time.perf_counter()
    grid = render_record(record, layout=layout, global_prompt=global_prompt)
    elapsed = time.perf_counter() - t0
    entry = save_png(grid, out_path)
    entry["seconds"] = elapsed
    if raw_path:
        entry["raw"] = save_raw_grid(grid, raw_path)
    Path(str(out_path) + ".manifest.json").write_text(dumps(entry))
    click.echo(f"wrote {out_path} ({elapsed * 1000:.1f} ms)")


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True)
@click.option("--layer", type=int, default=0, help="layer whose offset sweeps")
@click.option("--count", type=int, default=9, help="number of layouts")
@click.option("--outdir", required=True)
@click.option("--global-prompt", default=None)
def sweep(checkpoint_path, layer, count, outdir, global_prompt):
    """Render a grid of layouts stepping one layer across its range."""
    record, _ = _checkpoint_and_denoiser(checkpoint_path)
    cp, _, _ = record.current()
    scene = cp.scene
    if not 0 <= layer < scene.K - 1:
        _fail(f"layer {layer} is not a movable layer")
    mu, nu = scene.layers[layer].movement_range
    side = int(np.ceil(np.sqrt(count)))
    dxs = np.unique(np.linspace(-mu, mu, side).round().astype(int))
    dys = np.unique(np.linspace(-nu, nu, side).round().astype(int))
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    images = []
    base = list(scene.canonical_layout().offsets)
    n = 0
    for dy in dys:
        for dx in dxs:
            if n >= count:
                break
            offsets = list(base)
            offsets[layer] = (int(dx), int(dy))
            grid = render_record(record, layout=offsets, global_prompt=global_prompt)
            name = f"view_{n:03d}.png"
            entry = save_png(grid, out / name)
            entry["layout"] = [list(o) for o in offsets]
            images.append(entry)
            n += 1
    (out / "manifest.json").write_text(dumps({"images": images}))
    click.echo(f"wrote {n} images to {outdir}")


@main.command("eval")
@click.option("--pairs", "pairs_path", required=True,
              help="JSON list of {name, image_a, mask_a, image_b, mask_b}")
@click.option("--out", "out_path", required=True)
@click.option("--data-range", type=float, default=1.0)
def eval_cmd(pairs_path, out_path, data_range):
    """Compute metrics over image/mask pairs; paths are relative to the list."""
    spec = _load_json(pairs_path)
    base = Path(pairs_path).parent
    records = []
    for pair in spec:
        try:
            img_a = load_png(base / pair["image_a"])
            img_b = load_png(base / pair["image_b"])
            mask_a = _load_mask_png(base / pair["mask_a"])
            mask_b = _load_mask_png(base / pair["mask_b"])
        except FileNotFoundError as exc:
            _fail(f"missing input: {exc}")
        records.append(
            PairRecord(
                name=pair.get("name", pair["image_a"]),
                mask_iou=mask_iou(mask_a, mask_b),
                consistency=consistency(mask_a, mask_b),
                visual_consistency=visual_consistency(img_a, mask_a, img_b, mask_b),
                ssim=ssim(img_a, img_b, data_range=data_range),
            )
        )
    report = MetricsReport(records=records)
    Path(out_path).write_text(dumps(report.to_dict()))
    agg = report.aggregates()
    for metric, stats in agg.items():
        click.echo(f"{metric}: mean={stats['mean']:.4f} std={stats['stddev']:.4f}")
    click.echo(f"wrote {out_path}")


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True)
@click.option("--script", "script_path", required=True,
              help="JSON list of edit operations")
@click.option("--out", "out_path", required=True)
def edit(checkpoint_path, script_path, out_path):
    """Apply an edit script to a checkpoint."""
    record, manifest = _checkpoint_and_denoiser(checkpoint_path)
    ops = _load_json(script_path)
    if not isinstance(ops, list):
        _fail("edit script must be a JSON list of operations")
    cp, _, _ = record.current()
    from .scene import apply_edit

    scene = cp.scene
    for op_dict in ops:
        try:
            scene = apply_edit(scene, edit_from_dict(op_dict, scene.shape))
        except Exception as exc:
            _fail(f"edit failed: {exc}")
    from dataclasses import replace as _replace

    save_checkpoint(_replace(cp, scene=scene), out_path)
    manifest["edits"] = manifest.get("edits", []) + ops
    Path(str(out_path) + ".manifest.json").write_text(dumps(manifest))
    click.echo(f"wrote {out_path}")


@main.command()
@click.option("--store", "store_path", required=True)
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
@click.option("--workers", type=int, default=2)
@click.option("--config", "config_path", default=None, help="default run config JSON")
def serve(store_path, host, port, workers, config_path):
    """Run the scene-editing service."""
    import uvicorn

    from .service import create_app

    rc = _run_config(config_path) if config_path else None
    app = create_app(store_path, run_defaults=rc, workers=workers)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    sys.exit(main())
