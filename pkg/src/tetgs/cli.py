"""Command-line pipeline driver.

Usage: ``tetgs <stage> --config job.json [--seed N] [--out DIR]`` with stages
grid, extract, partition, adapt, paint, render, and metrics. Each stage reads
one JSON job config, writes its artifacts plus a ``manifest.json`` recording
input hashes, parameters, and a metric summary, and exits 0 on success. Any
failure prints a machine-readable error JSON on stderr and exits nonzero.

All randomness flows from the single seed (``--seed`` overrides the config's
``seed`` field), so identical config + seed reproduce artifacts bit for bit.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from .adapt import AdaptConfig, TargetSdfGuidance, adapt
from .embed import allocate
from .extract import effective_sdf, extract, euler_characteristic, is_watertight
from .fields import field_from_config
from .grid import build_grid, sample_field, subdivide
from .metrics import psnr, ssim
from .paint import (NoisePainter, OraclePainter, PaintState, paint_step,
                    run_schedule, view_schedule)
from .partition import (MaskView, classify_faces, freeze, partition_tets)
from .render import Camera, render

STAGES = ("grid", "extract", "partition", "adapt", "paint", "render", "metrics")


def _cameras_from_config(cfg: dict) -> list[Camera]:
    """Either an explicit camera list or orbit-schedule parameters."""
    if "cameras" in cfg:
        return [Camera.from_config(c) for c in cfg["cameras"]]
    sched = cfg["schedule"]
    kwargs = {k: sched[k] for k in ("width", "height", "focal", "up")
              if k in sched}
    return view_schedule(sched["center"], sched["radius"],
                         elevations=tuple(sched.get("elevations", (0, 20, -20))),
                         **kwargs)


def stage_grid(cfg: dict, out: Path, seed: int) -> dict:
    grid = build_grid(cfg["bbox"], cfg["resolution"])
    if "field" in cfg:
        grid = sample_field(grid, field_from_config(cfg["field"]))
    path = out / "grid.json"
    io.save_grid(grid, path)
    return {"outputs": {"grid": path},
            "metrics": {"vertices": grid.num_vertices, "tets": grid.num_tets}}


def stage_extract(cfg: dict, out: Path, seed: int) -> dict:
    grid = io.load_grid(cfg["grid"])
    mesh = extract(grid)
    obj = out / "mesh.obj"
    io.save_mesh(mesh, obj)
    return {
        "inputs": {"grid": cfg["grid"]},
        "outputs": {"mesh": obj, "provenance": obj.with_suffix(".provenance.json")},
        "metrics": {"vertices": mesh.num_verts, "faces": mesh.num_faces,
                    "watertight": is_watertight(mesh),
                    "euler_characteristic": euler_characteristic(mesh)},
    }


def stage_partition(cfg: dict, out: Path, seed: int) -> dict:
    grid = io.load_grid(cfg["grid"])
    mesh = io.load_mesh(cfg["mesh"])
    views = [MaskView(Camera.from_config(v["camera"]),
                      (io.load_mask_png(v["mask"]) > 0.5).astype(np.uint8))
             for v in cfg["views"]]
    keep_faces, edit_faces = classify_faces(
        mesh, views, agreement=cfg.get("agreement", 0.5),
        cell_size=grid.cell_size)
    part = partition_tets(mesh, keep_faces, grid)
    frozen = freeze(grid, part)

    part_path = out / "partition.json"
    grid_path = out / "grid.json"
    io.save_json(part.to_config(), part_path)
    io.save_grid(frozen, grid_path)
    return {
        "inputs": {"grid": cfg["grid"], "mesh": cfg["mesh"],
                   **{f"mask_{i}": v["mask"] for i, v in enumerate(cfg["views"])}},
        "outputs": {"partition": part_path, "grid": grid_path},
        "metrics": {"keep_faces": len(keep_faces), "edit_faces": len(edit_faces),
                    "frozen_vertices": int(frozen.frozen.sum())},
    }


def _crossing_tets(grid) -> np.ndarray:
    signs = effective_sdf(grid)[grid.tets] < 0
    return np.flatnonzero(signs.any(axis=1) & ~signs.all(axis=1))


def stage_adapt(cfg: dict, out: Path, seed: int) -> dict:
    torch.manual_seed(seed)
    grid = io.load_grid(cfg["grid"])
    g = cfg["guidance"]
    if g["type"] != "target_sdf":
        raise ValueError(f"unknown guidance type: {g['type']!r}")
    guidance = TargetSdfGuidance(field_from_config(g["field"]),
                                 weight_global=g.get("weight_global", 1.0),
                                 weight_local=g.get("weight_local", 1.0))
    lambdas = cfg.get("lambdas", {})

    def phase_config(steps):
        return AdaptConfig(
            steps=steps, learning_rate=cfg.get("learning_rate", 1e-3),
            lambda_global=lambdas.get("global", 0.5),
            lambda_local=lambdas.get("local", 0.5),
            lambda_sa=lambdas.get("sa", 5000.0),
            lambda_nc=lambdas.get("nc", 2000.0),
            soft_keep=cfg.get("soft_keep", False))

    # Optional coarse-to-fine schedule: each phase may first subdivide the
    # tets currently crossing the zero level set.
    phases = cfg.get("schedule", [{"steps": cfg.get("steps", 1000)}])
    histories = []
    for phase in phases:
        if phase.get("subdivide_crossing"):
            grid = subdivide(grid, _crossing_tets(grid))
        result = adapt(grid, guidance, phase_config(int(phase["steps"])))
        grid = result.grid
        histories.append(result.history)
    history = np.concatenate(histories, axis=0)
    history[:, 0] = np.arange(len(history))

    grid_path = out / "grid.json"
    loss_path = out / "loss.csv"
    io.save_grid(grid, grid_path)
    io.save_loss_log(history, loss_path)
    return {
        "inputs": {"grid": cfg["grid"]},
        "outputs": {"grid": grid_path, "loss_log": loss_path},
        "metrics": {"steps": len(history), "final_total": float(history[-1, 1])},
    }


def _make_painter(cfg: dict, seed: int):
    kind = cfg["type"]
    if kind == "oracle":
        mesh = io.load_mesh(cfg["mesh"])
        reference = io.load_kernels(cfg["kernels"], mesh)
        return OraclePainter(reference, background=cfg.get("background"))
    if kind == "noise":
        base = _make_painter(cfg["base"], seed)
        return NoisePainter(base, amplitude=cfg.get("amplitude", 0.05), seed=seed)
    raise ValueError(f"unknown painter type: {kind!r}")


def stage_paint(cfg: dict, out: Path, seed: int) -> dict:
    torch.manual_seed(seed)
    grid = io.load_grid(cfg["grid"])
    mesh = io.load_mesh(cfg["mesh"])
    if "kernels" in cfg:
        gaussians = io.load_kernels(cfg["kernels"], mesh)
    else:
        gaussians = allocate(mesh)
    partition = io.load_json(cfg["partition"])
    edit_faces = np.asarray(partition["edit_faces"], dtype=np.int64)

    cameras = _cameras_from_config(cfg)
    state = PaintState.create(edit_faces, cameras)
    painter = _make_painter(cfg["painter"], seed)

    kwargs = {}
    for key in ("inner_steps", "blur_radius", "threshold", "lambda_ssim",
                "learning_rate", "background"):
        if key in cfg:
            kwargs[key] = cfg[key]

    reports: list[dict] = []
    checkpoint_dir = out / "checkpoints"
    if cfg.get("checkpoints", True):
        checkpoint_dir.mkdir(exist_ok=True)
        for view in range(len(cameras)):
            report: dict = {}
            gaussians, state = paint_step(state, gaussians, painter,
                                          cell_size=grid.cell_size,
                                          report=report, **kwargs)
            reports.append(report)
            io.save_kernels(gaussians, checkpoint_dir / f"view_{view:03d}.ply")
    else:
        gaussians, state = run_schedule(state, gaussians, painter,
                                        cell_size=grid.cell_size,
                                        reports=reports, **kwargs)

    kernels_path = out / "kernels.ply"
    loss_path = out / "loss.csv"
    io.save_kernels(gaussians, kernels_path)
    rows = [[i, r["loss_before"], r["loss_after"], r["faces_handled"]]
            for i, r in enumerate(reports)]
    io.save_loss_log(rows, loss_path,
                     header=("view", "loss_before", "loss_after", "faces_handled"))
    return {
        "inputs": {"grid": cfg["grid"], "mesh": cfg["mesh"],
                   "partition": cfg["partition"]},
        "outputs": {"kernels": kernels_path, "loss_log": loss_path},
        "metrics": {"views": len(reports),
                    "uncolored_faces": state.uncolored_count},
    }


def stage_render(cfg: dict, out: Path, seed: int) -> dict:
    mesh = io.load_mesh(cfg["mesh"])
    gaussians = io.load_kernels(cfg["kernels"], mesh)
    cameras = _cameras_from_config(cfg)
    channels = tuple(cfg.get("channels", ("color",)))
    background = cfg.get("background")
    labels = None
    if "partition" in cfg:  # mask channel marks the partition's edit faces
        labels = np.zeros(mesh.num_faces, dtype=np.uint8)
        labels[np.asarray(io.load_json(cfg["partition"])["edit_faces"],
                          dtype=np.int64)] = 1

    outputs = {}
    for i, camera in enumerate(cameras):
        result = render(gaussians, mesh, camera, channels=channels,
                        labels=labels, background=background)
        stem = f"view_{i:03d}"
        if result.color is not None:
            path = out / f"{stem}_color.png"
            io.save_color_png(result.color, path, result.alpha)
            outputs[f"{stem}_color"] = path
        if result.normal is not None:
            path = out / f"{stem}_normal.png"
            io.save_normal_png(result.normal, path)
            outputs[f"{stem}_normal"] = path
        if result.mask is not None:
            path = out / f"{stem}_mask.png"
            io.save_mask_png(result.mask, path)
            outputs[f"{stem}_mask"] = path
        if result.depth is not None:
            path = out / f"{stem}_depth.raw"
            io.save_depth(result.depth, path)
            outputs[f"{stem}_depth"] = path
    return {
        "inputs": {"mesh": cfg["mesh"], "kernels": cfg["kernels"]},
        "outputs": outputs,
        "metrics": {"views": len(cameras)},
    }


def stage_metrics(cfg: dict, out: Path, seed: int) -> dict:
    pairs = cfg["pairs"]
    summary = {}
    inputs = {}
    for i, pair in enumerate(pairs):
        a, _ = io.load_color_png(pair["a"])
        b, _ = io.load_color_png(pair["b"])
        name = pair.get("name", f"pair_{i}")
        summary[name] = {"psnr": psnr(a, b), "ssim": ssim(a, b)}
        inputs[f"{name}_a"] = pair["a"]
        inputs[f"{name}_b"] = pair["b"]
    path = out / "metrics.json"
    io.save_json(summary, path)
    return {"inputs": inputs, "outputs": {"metrics": path}, "metrics": summary}


_HANDLERS = {
    "grid": stage_grid,
    "extract": stage_extract,
    "partition": stage_partition,
    "adapt": stage_adapt,
    "paint": stage_paint,
    "render": stage_render,
    "metrics": stage_metrics,
}


def run(stage: str, config: dict, out: Path, seed: int) -> dict:
    """Execute one stage and write its manifest; returns the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    np.random.seed(seed % 2 ** 32)
    result = _HANDLERS[stage](config, out, seed)
    params = {k: v for k, v in config.items()
              if not isinstance(v, (dict, list)) or k in ("lambdas", "schedule")}
    manifest = io.write_manifest(
        out / "manifest.json", stage=stage,
        inputs=result.get("inputs", {}),
        parameters={**params, "seed": seed},
        outputs=result.get("outputs", {}),
        metrics=result.get("metrics", {}))
    return manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tetgs", description="Tetrahedron-constrained splatting pipeline")
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", required=True, help="job config JSON")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's seed")
    parser.add_argument("--out", default=".", help="output directory")
    args = parser.parse_args(argv)

    try:
        config = io.load_json(args.config)
        seed = args.seed if args.seed is not None else int(config.get("seed", 0))
        manifest = run(args.stage, config, Path(args.out), seed)
    except Exception as exc:  # pragma: no branch
        error = {"error": type(exc).__name__, "stage": args.stage,
                 "message": str(exc)}
        print(json.dumps(error), file=sys.stderr)
        return 1
    print(json.dumps({"stage": args.stage, "metrics": manifest["metrics"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
