"""Operator surface: reconstruct / stylize / render / mesh.

Exit codes: 0 success, 2 validation failure, 3 training divergence,
4 bridge (remote encoder) failure, 5 I/O failure. Setting
RADIART_DETERMINISTIC=1 is equivalent to passing --deterministic.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from ._alloc import raise_malloc_thresholds
from .config import build_arch, build_task, build_train_config, load_config
from .embedding import make_provider, FeatureExtractor
from .errors import BridgeError, DivergenceError, ValidationError
from .field import load_checkpoint, save_checkpoint
from .geometry import Camera, load_dataset, save_png
from .meshing import bake_density_grid, export_obj, marching_cubes
from .renderer import render_view, write_pfm
from .trainer import stylize, train_reconstruction

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_BRIDGE = 4
EXIT_IO = 5


def _deterministic(args) -> bool:
    return bool(getattr(args, "deterministic", False)
                or os.environ.get("RADIART_DETERMINISTIC") == "1")


def _make_extractor(spec: str, provider, timeout: float):
    kind, _, rest = spec.partition(":")
    if kind == "toy":
        return FeatureExtractor(seed=int(rest or 0))
    if kind == "bridge":
        if provider is not None and provider.name.startswith("bridge:") \
                and "features" in provider.capabilities:
            return provider  # reuse the live connection
        from .bridge_client import BridgeProvider
        return BridgeProvider(rest, timeout=timeout)
    raise ValidationError(f"unknown extractor spec {spec!r}")


def cmd_reconstruct(args) -> int:
    config = load_config(args.config, args.set or [])
    if _deterministic(args):
        config["deterministic"] = True
    arch = build_arch(config)
    build_train_config(config)  # reject invalid settings before any compute
    if not config["dataset"]["path"]:
        raise ValidationError("dataset.path is required")
    dataset = load_dataset(config["dataset"]["path"])
    train_config = build_train_config(config, dataset.near, dataset.far)
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)

    params, report = train_reconstruction(dataset, arch, train_config)
    save_checkpoint(out / "f_rec.ckpt", params, arch)
    report.meta["deterministic"] = config["deterministic"]
    report.write_jsonl(out / "reconstruct_report.jsonl")
    for i in train_config.stage1.holdout:
        img = render_view(params, arch, dataset.frames[i][1],
                          train_config.render.with_seed(config["seed"] + 7000 + i))
        save_png(out / f"holdout_{i:03d}.png", img)
    print(f"wrote {out / 'f_rec.ckpt'}")
    return EXIT_OK


def cmd_stylize(args) -> int:
    config = load_config(args.config, args.set or [])
    if _deterministic(args):
        config["deterministic"] = True
    params, arch = load_checkpoint(args.checkpoint)
    if params.role != "reconstructed":
        raise ValidationError(
            f"stylize needs a reconstructed checkpoint, got {params.role!r}")
    task = build_task(config)
    build_train_config(config)  # reject invalid settings before any compute
    if not config["dataset"]["path"]:
        raise ValidationError("dataset.path is required")
    dataset = load_dataset(config["dataset"]["path"])
    train_config = build_train_config(config, dataset.near, dataset.far)
    provider = make_provider(config["provider"]["embedding"],
                             timeout=config["provider"]["timeout"])
    extractor = _make_extractor(config["provider"]["extractor"], provider,
                                config["provider"]["timeout"])
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)

    poses = list(range(len(dataset.frames)))[:3]
    for i in poses:
        img = render_view(params, arch, dataset.frames[i][1],
                          train_config.render.with_seed(config["seed"] + 8000 + i))
        save_png(out / f"before_{i:03d}.png", img)

    f_sty, report = stylize(params, arch, dataset, task, provider, extractor,
                            train_config)
    save_checkpoint(out / "f_sty.ckpt", f_sty, arch)
    report.meta["deterministic"] = config["deterministic"]
    if hasattr(provider, "variant"):
        report.meta["provider_variant"] = provider.variant
    report.write_jsonl(out / "stylize_report.jsonl")
    for i in poses:
        img = render_view(f_sty, arch, dataset.frames[i][1],
                          train_config.render.with_seed(config["seed"] + 8000 + i))
        save_png(out / f"after_{i:03d}.png", img)
    print(f"wrote {out / 'f_sty.ckpt'}")
    return EXIT_OK


def _camera_from_spec(path: str) -> Camera:
    doc = json.loads(Path(path).read_text())
    return Camera(fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
                  width=doc["width"], height=doc["height"],
                  camera_to_world=np.asarray(doc["c2w"], dtype=np.float64)
                  .reshape(4, 4))


def _scaled_camera(cam: Camera, width: int, height: int) -> Camera:
    sx, sy = width / cam.width, height / cam.height
    return Camera(fx=cam.fx * sx, fy=cam.fy * sy,
                  cx=cam.cx * sx, cy=cam.cy * sy,
                  width=width, height=height,
                  camera_to_world=cam.camera_to_world)


def cmd_render(args) -> int:
    params, arch = load_checkpoint(args.checkpoint)
    if args.camera:
        camera = _camera_from_spec(args.camera)
        near, far = args.near, args.far
    else:
        if not args.dataset:
            raise ValidationError("render needs --camera or --dataset with --pose-index")
        dataset = load_dataset(args.dataset)
        if not (0 <= args.pose_index < len(dataset.frames)):
            raise ValidationError(
                f"pose index {args.pose_index} out of range "
                f"0..{len(dataset.frames) - 1}")
        camera = dataset.frames[args.pose_index][1]
        near, far = dataset.near, dataset.far
    if args.width and args.height:
        camera = _scaled_camera(camera, args.width, args.height)
    from .renderer import RenderConfig
    config = RenderConfig(samples_per_ray=args.samples, near=near, far=far,
                          jitter_seed=args.seed)
    image = render_view(params, arch, camera, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(out.with_suffix(".png"), image)
    write_pfm(out.with_suffix(".pfm"), image)
    print(f"wrote {out.with_suffix('.png')} and {out.with_suffix('.pfm')}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    params, arch = load_checkpoint(args.checkpoint)
    if args.res < 2:
        raise ValidationError("mesh resolution must be >= 2")
    if args.bbox:
        vals = [float(v) for v in args.bbox.split(",")]
        if len(vals) != 6:
            raise ValidationError("--bbox needs x0,y0,z0,x1,y1,z1")
        bbox_min, bbox_max = vals[:3], vals[3:]
    else:
        e = abs(args.extent)
        bbox_min, bbox_max = (-e,) * 3, (e,) * 3
    grid = bake_density_grid(params, arch, bbox_min, bbox_max, args.res)
    mesh = marching_cubes(grid, iso=args.iso)
    if len(mesh.triangles) == 0:
        print("warning: iso-surface is empty at this level", file=sys.stderr)
    export_obj(mesh, args.out)
    print(f"wrote {args.out} ({len(mesh.vertices)} vertices, "
          f"{len(mesh.triangles)} triangles)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radiart",
        description="volumetric reconstruction and text-guided stylization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="fit a field to a multi-view dataset")
    p.add_argument("config")
    p.add_argument("--set", action="append", metavar="section.key=value")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("stylize", help="fine-tune a checkpoint toward a prompt")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.add_argument("--set", action="append", metavar="section.key=value")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(fn=cmd_stylize)

    p = sub.add_parser("render", help="render a checkpoint from a pose")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", help="dataset directory for --pose-index")
    p.add_argument("--pose-index", type=int, default=0)
    p.add_argument("--camera", help="camera spec JSON file")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--samples", type=int, default=192)
    p.add_argument("--near", type=float, default=1.0)
    p.add_argument("--far", type=float, default=4.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="render")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("mesh", help="extract an iso-surface mesh")
    p.add_argument("checkpoint")
    p.add_argument("--bbox", help="x0,y0,z0,x1,y1,z1 bake volume")
    p.add_argument("--extent", type=float, default=1.5,
                   help="half-width of the cubic bake volume (if no --bbox)")
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--iso", type=float, default=float(np.log(2.0)))
    p.add_argument("--out", default="mesh.obj")
    p.set_defaults(fn=cmd_mesh)
    return parser


def main(argv=None) -> int:
    raise_malloc_thresholds()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except BridgeError as e:
        print(f"bridge failure: {e}", file=sys.stderr)
        return EXIT_BRIDGE
    except OSError as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
